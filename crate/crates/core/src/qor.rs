//! Analytical quality-of-results model.
//!
//! `estimate` predicts cycle latency and resource usage for a structured
//! kernel under a set of synthesis directives, without invoking a synthesis
//! tool. The model:
//!
//! * **Statements** — dataflow timing. Every value carries the time it
//!   becomes available; an operation finishes at `max(operand times) +
//!   op latency`. Array elements addressed by compile-time indices are
//!   tracked individually, other accesses at whole-array granularity, so a
//!   straight-line region's latency is the critical path of its dependence
//!   DAG, not the statement count.
//! * **Sequential loops** — `trip × body`. **Pipelined loops** —
//!   `II·(trip−1) + body`, where the legal II is the requested II raised to
//!   `carried distance × slowest operation on the carried path`; a
//!   hazard-free assertion on an array removes that array from
//!   consideration. **Unrolled loops** (factor `f`) — the body is
//!   materialized `f` times with concrete counter values and scheduled as
//!   one DAG, so independent iterations overlap and recurrences stay
//!   serial; the effective trip count drops to `trip/f`.
//! * **Multipliers** occupy DSP blocks for their latency window:
//!   `ceil(W/27)·ceil(W/18)` per `W`-bit product (12 for 64-bit). 128-bit
//!   products decompose into four 64-bit wide multiplies plus an
//!   accumulation tree. Sequential ops reuse blocks — DSP usage is the peak
//!   concurrent demand — while every stage of a pipelined loop holds its
//!   blocks simultaneously. Adders, logic, and selects cost LUTs
//!   proportional to width; registers (FF) mirror LUTs inside pipelined
//!   loops. BRAM is `ceil(bits/18432)` per array, times the partition
//!   factor when cyclically partitioned.
//!
//! The numbers are a documented model, not vendor-tool output: they exist to
//! rank design points, and the scoring side of this module (`resource_percent`,
//! `npi`, `pareto_front`, `refine`, `hypervolume`) consumes them as such.

use crate::explore::{analyze_loops, LoopSummary, PragmaConfig};
use crate::ir::*;
use serde::de::DeserializeOwned;
use std::collections::BTreeMap;
use std::path::Path;

/// Predicted cost of one design point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QoR {
    pub latency_cycles: u64,
    pub dsp_used: u64,
    pub lut_used: u64,
    pub ff_used: u64,
    pub bram_used: u64,
}

/// Resource capacities of the synthesis target.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub dsp_total: u64,
    pub lut_total: u64,
    pub ff_total: u64,
    pub bram_total: u64,
}

impl Default for DeviceProfile {
    fn default() -> DeviceProfile {
        DeviceProfile {
            name: "zu9eg".into(),
            dsp_total: 2520,
            lut_total: 274_080,
            ff_total: 548_160,
            bram_total: 912,
        }
    }
}

impl DeviceProfile {
    /// Built-in profile by name; anything unknown must come from a file.
    pub fn named(name: &str) -> Option<DeviceProfile> {
        match name {
            "zu9eg" => Some(DeviceProfile::default()),
            _ => None,
        }
    }

    pub fn from_file(path: &Path) -> Result<DeviceProfile, ConfigError> {
        let dev: DeviceProfile = load_config(path)?;
        if dev.dsp_total == 0 || dev.lut_total == 0 || dev.ff_total == 0 || dev.bram_total == 0 {
            return Err(ConfigError::Parse {
                path: path.display().to_string(),
                msg: "device totals must be positive".into(),
            });
        }
        Ok(dev)
    }

    /// Resource fields exceeded by `q`, for reporting. Usage is never
    /// clamped.
    pub fn over_budget(&self, q: &QoR) -> Vec<&'static str> {
        let mut over = Vec::new();
        if q.dsp_used > self.dsp_total {
            over.push("dsp");
        }
        if q.lut_used > self.lut_total {
            over.push("lut");
        }
        if q.ff_used > self.ff_total {
            over.push("ff");
        }
        if q.bram_used > self.bram_total {
            over.push("bram");
        }
        over
    }
}

/// Objective weights for the normalized score. Must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Weights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for Weights {
    fn default() -> Weights {
        Weights { w1: 0.5, w2: 0.5 }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("weights must be nonnegative and sum to 1 (got {0} and {1})")]
pub struct BadWeights(pub f64, pub f64);

impl Weights {
    pub fn new(w1: f64, w2: f64) -> Result<Weights, BadWeights> {
        if w1 < 0.0 || w2 < 0.0 || (w1 + w2 - 1.0).abs() > 1e-9 {
            return Err(BadWeights(w1, w2));
        }
        Ok(Weights { w1, w2 })
    }
}

/// Per-operation cost tables. `latency` is in cycles; `lut64` is the LUT
/// count of one 64-bit instance and scales linearly with width. A loaded
/// file replaces each table wholesale: absent entries surface as
/// [`EstimateError::MissingEntry`], never as silent defaults.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EstimatorParams {
    pub latency: BTreeMap<String, u64>,
    pub lut64: BTreeMap<String, u64>,
}

impl Default for EstimatorParams {
    fn default() -> EstimatorParams {
        let latency = [
            ("mul", 4),
            ("mulwide", 5),
            ("add", 1),
            ("sub", 1),
            ("logic", 1),
            ("shift", 0),
            ("mux", 1),
        ];
        let lut64 = [
            ("mul", 0),
            ("mulwide", 0),
            ("add", 64),
            ("sub", 64),
            ("logic", 64),
            ("shift", 0),
            ("mux", 32),
        ];
        EstimatorParams {
            latency: latency.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lut64: lut64.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

impl EstimatorParams {
    pub fn from_file(path: &Path) -> Result<EstimatorParams, ConfigError> {
        load_config(path)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("read {path}: {err}")]
    Io { path: String, err: std::io::Error },
    #[error("parse {path}: {msg}")]
    Parse { path: String, msg: String },
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|err| ConfigError::Io { path: path.display().to_string(), err })?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), msg: e.to_string() })
    } else {
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), msg: e.to_string() })
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EstimateError {
    #[error("no cost table entry for `{0}`")]
    MissingEntry(String),
    #[error("loop `{0}` has a runtime-variable bound; staticize bounds first")]
    VariableBound(String),
    #[error("loop `{0}`: unroll factor {1} does not divide trip count {2}")]
    BadUnroll(String, u32, i64),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("no loop labeled `{0}`")]
    UnknownLoop(String),
    #[error(transparent)]
    Width(#[from] ValidateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Mul,
    MulWide,
    Add,
    Sub,
    Logic,
    Shift,
    Mux,
}

impl OpKind {
    fn key(self) -> &'static str {
        match self {
            OpKind::Mul => "mul",
            OpKind::MulWide => "mulwide",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Logic => "logic",
            OpKind::Shift => "shift",
            OpKind::Mux => "mux",
        }
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    (a + b - 1) / b
}

/// DSP blocks of one `bits`-wide product.
fn dsp_mul(bits: u32) -> u64 {
    if bits > 64 {
        4 * dsp_mul(64)
    } else {
        ceil_div(bits as u64, 27) * ceil_div(bits as u64, 18)
    }
}

/// Availability times of every storage location during one region schedule.
#[derive(Debug, Default, Clone)]
struct Timeline {
    scalar: BTreeMap<String, u64>,
    elem: BTreeMap<(String, i64), u64>,
    /// Last write through a non-constant index, per array.
    coarse: BTreeMap<String, u64>,
    /// Latest constant-index write, per array (for coarse reads).
    max_elem: BTreeMap<String, u64>,
}

impl Timeline {
    fn read_scalar(&self, name: &str) -> u64 {
        self.scalar.get(name).copied().unwrap_or(0)
    }

    fn read_elem(&self, array: &str, index: Option<i64>) -> u64 {
        let coarse = self.coarse.get(array).copied().unwrap_or(0);
        match index {
            Some(i) => coarse.max(self.elem.get(&(array.to_string(), i)).copied().unwrap_or(0)),
            None => coarse.max(self.max_elem.get(array).copied().unwrap_or(0)),
        }
    }

    fn whole_array(&self, array: &str) -> u64 {
        self.read_elem(array, None)
    }

    fn write_scalar(&mut self, name: &str, t: u64) {
        self.scalar.insert(name.to_string(), t);
    }

    fn write_elem(&mut self, array: &str, index: Option<i64>, t: u64) {
        match index {
            Some(i) => {
                self.elem.insert((array.to_string(), i), t);
                let m = self.max_elem.entry(array.to_string()).or_insert(0);
                *m = (*m).max(t);
            }
            None => {
                let c = self.coarse.entry(array.to_string()).or_insert(0);
                *c = (*c).max(t);
            }
        }
    }
}

/// Storage touched by an opaque scheduling atom (a loop or call).
#[derive(Debug, Default, Clone)]
struct Touch {
    scalars_r: Vec<String>,
    scalars_w: Vec<String>,
    arrays_r: Vec<String>,
    arrays_w: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Cost {
    latency: u64,
    /// Peak concurrent DSP demand.
    peak_dsp: u64,
    /// Every multiplier instance (what a pipeline keeps live).
    total_dsp: u64,
    lut: u64,
    ff: u64,
}

struct Estimator<'a> {
    program: &'a StructuredProgram,
    pragmas: &'a PragmaConfig,
    params: &'a EstimatorParams,
    summaries: BTreeMap<String, LoopSummary>,
}

impl<'a> Estimator<'a> {
    fn latency_of(&self, k: OpKind) -> Result<u64, EstimateError> {
        self.params
            .latency
            .get(k.key())
            .copied()
            .ok_or_else(|| EstimateError::MissingEntry(format!("latency.{}", k.key())))
    }

    fn lut_of(&self, k: OpKind, bits: u32) -> Result<u64, EstimateError> {
        let base = self
            .params
            .lut64
            .get(k.key())
            .copied()
            .ok_or_else(|| EstimateError::MissingEntry(format!("lut64.{}", k.key())))?;
        Ok(ceil_div(base * bits as u64, 64))
    }

    /// Latency of one product at `bits` width (wide products decompose).
    fn mul_latency(&self, bits: u32) -> Result<u64, EstimateError> {
        if bits > 64 {
            Ok(self.latency_of(OpKind::MulWide)? + 2 * self.latency_of(OpKind::Add)?)
        } else {
            self.latency_of(OpKind::Mul)
        }
    }

    fn mul_lut(&self, bits: u32) -> Result<u64, EstimateError> {
        if bits > 64 {
            // Partial-product accumulation adders.
            Ok(4 * self.lut_of(OpKind::Add, 64)?)
        } else {
            self.lut_of(OpKind::Mul, bits)
        }
    }

    /// Finish time of `e`'s value; accumulates resource usage and DSP busy
    /// intervals as a side effect.
    fn expr_time(
        &self,
        e: &Expr,
        env: &TypeEnv,
        tl: &Timeline,
        in_pipe: bool,
        intervals: &mut Vec<(u64, u64, u64)>,
        c: &mut Cost,
    ) -> Result<u64, EstimateError> {
        let lut = |c: &mut Cost, n: u64| {
            c.lut += n;
            if in_pipe {
                c.ff += n;
            }
        };
        Ok(match e {
            Expr::Lit { .. } | Expr::LoopVar { .. } => 0,
            Expr::Var { name } => tl.read_scalar(name),
            Expr::Read { array, index } => {
                tl.read_elem(array, eval_index(index, &IndexEnv::new()))
            }
            Expr::Not(a) => {
                let bits = expr_width(e, env)?.bits();
                lut(c, self.lut_of(OpKind::Logic, bits)?);
                self.expr_time(a, env, tl, in_pipe, intervals, c)?
                    + self.latency_of(OpKind::Logic)?
            }
            Expr::Trunc { arg, .. } | Expr::Zext { arg, .. } => {
                self.expr_time(arg, env, tl, in_pipe, intervals, c)?
            }
            Expr::Bin { op, lhs, rhs } => {
                let a = self.expr_time(lhs, env, tl, in_pipe, intervals, c)?;
                let b = self.expr_time(rhs, env, tl, in_pipe, intervals, c)?;
                let ready = a.max(b);
                let bits = expr_width(e, env)?.bits();
                match op {
                    BinOp::Mul => {
                        let lat = self.mul_latency(bits)?;
                        let dsp = dsp_mul(bits);
                        lut(c, self.mul_lut(bits)?);
                        c.total_dsp += dsp;
                        if lat > 0 && dsp > 0 {
                            intervals.push((ready, ready + lat, dsp));
                        }
                        ready + lat
                    }
                    BinOp::Add | BinOp::Sub => {
                        let k = if *op == BinOp::Add { OpKind::Add } else { OpKind::Sub };
                        lut(c, self.lut_of(k, bits)?);
                        ready + self.latency_of(k)?
                    }
                    BinOp::And | BinOp::Or | BinOp::Xor => {
                        lut(c, self.lut_of(OpKind::Logic, bits)?);
                        ready + self.latency_of(OpKind::Logic)?
                    }
                    BinOp::Shl | BinOp::Shr => {
                        // Constant shift amounts are wiring.
                        lut(c, self.lut_of(OpKind::Shift, bits)?);
                        ready + self.latency_of(OpKind::Shift)?
                    }
                }
            }
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => {
                let f = self.expr_time(flag, env, tl, in_pipe, intervals, c)?;
                let z = self.expr_time(if_zero, env, tl, in_pipe, intervals, c)?;
                let n = self.expr_time(if_nonzero, env, tl, in_pipe, intervals, c)?;
                lut(c, self.lut_of(OpKind::Mux, ty.bits())?);
                f.max(z).max(n) + self.latency_of(OpKind::Mux)?
            }
        })
    }

    /// Schedules one statement against the timeline; returns its finish time.
    fn schedule_stmt(
        &self,
        s: &Statement,
        env: &TypeEnv,
        tl: &mut Timeline,
        in_pipe: bool,
        intervals: &mut Vec<(u64, u64, u64)>,
        c: &mut Cost,
    ) -> Result<u64, EstimateError> {
        let finish = match &s.rhs {
            Rhs::Plain(e) => self.expr_time(e, env, tl, in_pipe, intervals, c)?,
            Rhs::Wide { op, ty, args } => {
                let mut ready = 0;
                for a in args {
                    ready = ready.max(self.expr_time(a, env, tl, in_pipe, intervals, c)?);
                }
                match op {
                    WideOp::MulWide => {
                        let lat = self.latency_of(OpKind::MulWide)?;
                        let dsp = dsp_mul(ty.bits());
                        c.total_dsp += dsp;
                        if lat > 0 {
                            intervals.push((ready, ready + lat, dsp));
                        }
                        ready + lat
                    }
                    WideOp::AddCarry | WideOp::SubBorrow => {
                        let k = if *op == WideOp::AddCarry { OpKind::Add } else { OpKind::Sub };
                        c.lut += self.lut_of(k, ty.bits())?;
                        if in_pipe {
                            c.ff += self.lut_of(k, ty.bits())?;
                        }
                        ready + self.latency_of(k)?
                    }
                }
            }
        };
        for t in &s.targets {
            match t {
                Lvalue::Local { name } => tl.write_scalar(name, finish),
                Lvalue::Elem { array, index } => {
                    tl.write_elem(array, eval_index(index, &IndexEnv::new()), finish)
                }
            }
        }
        Ok(finish)
    }

    /// Dataflow schedule of a node sequence. Statements interleave at value
    /// granularity; loops and calls are atomic blocks ordered by the storage
    /// they touch.
    fn region(&self, nodes: &[Node], env: &TypeEnv, in_pipe: bool) -> Result<Cost, EstimateError> {
        let mut tl = Timeline::default();
        let mut intervals: Vec<(u64, u64, u64)> = Vec::new();
        let mut c = Cost::default();
        let mut end = 0u64;

        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    let fin = self.schedule_stmt(s, env, &mut tl, in_pipe, &mut intervals, &mut c)?;
                    end = end.max(fin);
                }
                Node::For(l) => {
                    let (cost, touch) = self.loop_cost(l, env, in_pipe)?;
                    let fin = self.place_atom(&cost, &touch, &mut tl, &mut intervals);
                    c.lut += cost.lut;
                    c.ff += cost.ff;
                    c.total_dsp += cost.total_dsp;
                    end = end.max(fin);
                }
                Node::Call { callee, args } => {
                    let f = self
                        .program
                        .function(callee)
                        .ok_or_else(|| EstimateError::UnknownFunction(callee.clone()))?;
                    let mut fenv = env.clone();
                    for p in &f.params {
                        fenv.add_param(p);
                    }
                    let cost = self.region(&f.body, &fenv, in_pipe)?;
                    let mut touch = Touch::default();
                    touch_nodes(&f.body, self.program, &mut touch);
                    // Formal array names -> caller arrays.
                    let rename: BTreeMap<&str, &str> = f
                        .params
                        .iter()
                        .zip(args.iter())
                        .map(|(p, a)| (p.name.as_str(), a.as_str()))
                        .collect();
                    let map = |v: &mut Vec<String>| {
                        for x in v.iter_mut() {
                            if let Some(r) = rename.get(x.as_str()) {
                                *x = r.to_string();
                            }
                        }
                    };
                    map(&mut touch.arrays_r);
                    map(&mut touch.arrays_w);
                    let fin = self.place_atom(&cost, &touch, &mut tl, &mut intervals);
                    c.lut += cost.lut;
                    c.ff += cost.ff;
                    c.total_dsp += cost.total_dsp;
                    end = end.max(fin);
                }
            }
        }

        c.latency = end;
        c.peak_dsp = peak_demand(&mut intervals);
        Ok(c)
    }

    /// Inserts an atomic block into the schedule after everything it reads
    /// from or writes over, and reserves its DSP demand for its whole span.
    fn place_atom(
        &self,
        cost: &Cost,
        touch: &Touch,
        tl: &mut Timeline,
        intervals: &mut Vec<(u64, u64, u64)>,
    ) -> u64 {
        let mut start = 0u64;
        for s in &touch.scalars_r {
            start = start.max(tl.read_scalar(s));
        }
        for a in touch.arrays_r.iter().chain(&touch.arrays_w) {
            start = start.max(tl.whole_array(a));
        }
        for s in &touch.scalars_w {
            start = start.max(tl.read_scalar(s));
        }
        let fin = start + cost.latency;
        for s in &touch.scalars_w {
            tl.write_scalar(s, fin);
        }
        for a in &touch.arrays_w {
            tl.write_elem(a, None, fin);
        }
        if cost.latency > 0 && cost.peak_dsp > 0 {
            intervals.push((start, fin, cost.peak_dsp));
        }
        fin
    }

    fn loop_cost(
        &self,
        l: &ForLoop,
        env: &TypeEnv,
        outer_pipe: bool,
    ) -> Result<(Cost, Touch), EstimateError> {
        let mut touch = Touch::default();
        touch_nodes(&l.body, self.program, &mut touch);

        let trip = l
            .const_trip_count()
            .ok_or_else(|| EstimateError::VariableBound(l.label.clone()))?;
        if trip <= 0 {
            return Ok((Cost::default(), touch));
        }
        let factor = self.pragmas.unroll.get(&l.label).copied().unwrap_or(1).max(1);
        if trip % factor as i64 != 0 {
            return Err(EstimateError::BadUnroll(l.label.clone(), factor, trip));
        }
        let pipe_req = self.pragmas.pipeline.get(&l.label).copied();
        let in_pipe = outer_pipe || pipe_req.is_some();

        let flat = l.body.iter().all(|n| matches!(n, Node::Stmt(_)));
        let mut body_cost;
        if factor > 1 && flat {
            let copies = materialize(l, factor as i64);
            body_cost = self.region(&copies, env, in_pipe)?;
        } else {
            body_cost = self.region(&l.body, env, in_pipe)?;
            if factor > 1 {
                // Non-flat bodies replicate as whole blocks.
                body_cost.peak_dsp *= factor as u64;
                body_cost.total_dsp *= factor as u64;
                body_cost.lut *= factor as u64;
                body_cost.ff *= factor as u64;
                if self.effectively_carried(&l.label) {
                    body_cost.latency *= factor as u64;
                }
            }
        }

        let eff_trip = (trip / factor as i64) as u64;
        let (latency, peak) = match pipe_req {
            Some(req) => {
                let ii = (req.max(1) as u64).max(self.min_legal_ii(l)?);
                (ii * (eff_trip - 1) + body_cost.latency, body_cost.total_dsp)
            }
            None => (eff_trip * body_cost.latency, body_cost.peak_dsp),
        };

        Ok((
            Cost {
                latency,
                peak_dsp: peak,
                total_dsp: body_cost.total_dsp,
                lut: body_cost.lut,
                ff: body_cost.ff,
            },
            touch,
        ))
    }

    /// True when some inter-iteration hazard survives the directive set.
    fn effectively_carried(&self, label: &str) -> bool {
        let Some(s) = self.summaries.get(label) else { return false };
        !s.carried_scalars.is_empty()
            || s.carried_arrays.iter().any(|a| !self.pragmas.dependence_free.contains(a))
    }

    /// Smallest initiation interval the carried dependences allow.
    fn min_legal_ii(&self, l: &ForLoop) -> Result<u64, EstimateError> {
        if !self.effectively_carried(&l.label) {
            return Ok(1);
        }
        let s = &self.summaries[&l.label];
        let d = s.min_distance.unwrap_or(1).max(1) as u64;

        let mut stmts: Vec<Option<&Statement>> = Vec::new();
        flatten(&l.body, &mut stmts);
        let on_cycle: Vec<&Statement> = s
            .carried_stmts
            .iter()
            .filter_map(|&p| stmts.get(p).copied().flatten())
            .collect();
        let pool: Vec<&Statement> = if on_cycle.is_empty() {
            stmts.iter().copied().flatten().collect()
        } else {
            on_cycle
        };
        let mut slowest = 1;
        for st in pool {
            slowest = slowest.max(self.stmt_max_op_latency(st)?);
        }
        Ok((d * slowest).max(1))
    }

    /// Slowest single operation in one statement.
    fn stmt_max_op_latency(&self, s: &Statement) -> Result<u64, EstimateError> {
        let mut best = 0;
        let mut visit = |e: &Expr| -> Result<(), EstimateError> {
            let mut err = None;
            e.walk(&mut |sub| {
                let lat = match sub {
                    Expr::Bin { op: BinOp::Mul, .. } => self.mul_latency(64),
                    Expr::Bin { op: BinOp::Add, .. } => self.latency_of(OpKind::Add),
                    Expr::Bin { op: BinOp::Sub, .. } => self.latency_of(OpKind::Sub),
                    Expr::Bin { .. } | Expr::Not(_) => self.latency_of(OpKind::Logic),
                    Expr::Cmov { .. } => self.latency_of(OpKind::Mux),
                    _ => Ok(0),
                };
                match lat {
                    Ok(v) => best = best.max(v),
                    Err(e) => err = Some(e),
                }
            });
            err.map_or(Ok(()), Err)
        };
        for e in s.operand_exprs() {
            visit(e)?;
        }
        if let Rhs::Wide { op, .. } = &s.rhs {
            let k = match op {
                WideOp::MulWide => OpKind::MulWide,
                WideOp::AddCarry => OpKind::Add,
                WideOp::SubBorrow => OpKind::Sub,
            };
            best = best.max(self.latency_of(k)?);
        }
        Ok(best)
    }
}

/// Peak of the running sum over busy intervals.
fn peak_demand(intervals: &mut Vec<(u64, u64, u64)>) -> u64 {
    let mut events: Vec<(u64, i64)> = Vec::with_capacity(intervals.len() * 2);
    for &(s, f, d) in intervals.iter() {
        if f > s && d > 0 {
            events.push((s, d as i64));
            events.push((f, -(d as i64)));
        }
    }
    // Frees sort before allocations at the same instant: back-to-back
    // intervals share hardware.
    events.sort_by_key(|&(t, delta)| (t, delta));
    let mut running = 0i64;
    let mut peak = 0i64;
    for (_, delta) in events {
        running += delta;
        peak = peak.max(running);
    }
    peak as u64
}

/// `factor` copies of a flat loop body with the counter pinned to its first
/// `factor` values — the schedule shape every unrolled chunk shares.
fn materialize(l: &ForLoop, factor: i64) -> Vec<Node> {
    let mut out = Vec::new();
    for k in 0..factor {
        let value = l.start + k * l.step;
        for n in &l.body {
            if let Node::Stmt(s) = n {
                out.push(Node::Stmt(subst_stmt(s, &l.var, value)));
            }
        }
    }
    out
}

fn subst_expr(e: &Expr, var: &str, value: i64) -> Expr {
    match e {
        Expr::LoopVar { name, ty } if name == var => {
            Expr::lit((value as i128 as u128) & ty.mask(), *ty)
        }
        Expr::Lit { .. } | Expr::Var { .. } | Expr::LoopVar { .. } => e.clone(),
        Expr::Read { array, index } => Expr::Read {
            array: array.clone(),
            index: Box::new(subst_expr(index, var, value)),
        },
        Expr::Not(a) => Expr::Not(Box::new(subst_expr(a, var, value))),
        Expr::Trunc { to, arg } => {
            Expr::Trunc { to: *to, arg: Box::new(subst_expr(arg, var, value)) }
        }
        Expr::Zext { to, arg } => {
            Expr::Zext { to: *to, arg: Box::new(subst_expr(arg, var, value)) }
        }
        Expr::Bin { op, lhs, rhs } => Expr::Bin {
            op: *op,
            lhs: Box::new(subst_expr(lhs, var, value)),
            rhs: Box::new(subst_expr(rhs, var, value)),
        },
        Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
            ty: *ty,
            flag: Box::new(subst_expr(flag, var, value)),
            if_zero: Box::new(subst_expr(if_zero, var, value)),
            if_nonzero: Box::new(subst_expr(if_nonzero, var, value)),
        },
    }
}

fn subst_stmt(s: &Statement, var: &str, value: i64) -> Statement {
    let rhs = match &s.rhs {
        Rhs::Plain(e) => Rhs::Plain(subst_expr(e, var, value)),
        Rhs::Wide { op, ty, args } => Rhs::Wide {
            op: *op,
            ty: *ty,
            args: args.iter().map(|a| subst_expr(a, var, value)).collect(),
        },
    };
    let targets = s
        .targets
        .iter()
        .map(|t| match t {
            Lvalue::Local { name } => Lvalue::local(name),
            Lvalue::Elem { array, index } => Lvalue::Elem {
                array: array.clone(),
                index: Box::new(subst_expr(index, var, value)),
            },
        })
        .collect();
    Statement { targets, rhs }
}

/// Flattened pre-order statement view matching the analyzer's position
/// numbering (`None` marks a call).
fn flatten<'a>(nodes: &'a [Node], out: &mut Vec<Option<&'a Statement>>) {
    for n in nodes {
        match n {
            Node::Stmt(s) => out.push(Some(s)),
            Node::For(l) => flatten(&l.body, out),
            Node::Call { .. } => out.push(None),
        }
    }
}

fn touch_nodes(nodes: &[Node], program: &StructuredProgram, touch: &mut Touch) {
    let note = |v: &mut Vec<String>, name: &str| {
        if !v.iter().any(|x| x == name) {
            v.push(name.to_string());
        }
    };
    for n in nodes {
        match n {
            Node::Stmt(s) => {
                for e in s.operand_exprs() {
                    e.walk(&mut |sub| match sub {
                        Expr::Read { array, .. } => note(&mut touch.arrays_r, array),
                        Expr::Var { name } => note(&mut touch.scalars_r, name),
                        _ => {}
                    });
                }
                for t in &s.targets {
                    match t {
                        Lvalue::Elem { array, .. } => note(&mut touch.arrays_w, array),
                        Lvalue::Local { name } => note(&mut touch.scalars_w, name),
                    }
                }
            }
            Node::For(l) => touch_nodes(&l.body, program, touch),
            Node::Call { callee, args } => {
                for a in args {
                    note(&mut touch.arrays_r, a);
                    note(&mut touch.arrays_w, a);
                }
                if let Some(f) = program.function(callee) {
                    let mut inner = Touch::default();
                    touch_nodes(&f.body, program, &mut inner);
                    for s in inner.scalars_r {
                        note(&mut touch.scalars_r, &s);
                    }
                    for s in inner.scalars_w {
                        note(&mut touch.scalars_w, &s);
                    }
                }
            }
        }
    }
}

/// Smallest initiation interval `label`'s carried dependences allow under
/// the given directives (dependence assertions can relax it to 1).
pub fn min_initiation_interval(
    program: &StructuredProgram,
    label: &str,
    pragmas: &PragmaConfig,
    params: &EstimatorParams,
) -> Result<u64, EstimateError> {
    let info = analyze_loops(program);
    let est = Estimator {
        program,
        pragmas,
        params,
        summaries: info.loops.into_iter().map(|s| (s.label.clone(), s)).collect(),
    };
    let l = program
        .loops()
        .into_iter()
        .map(|(l, _)| l)
        .find(|l| l.label == label)
        .ok_or_else(|| EstimateError::UnknownLoop(label.to_string()))?;
    est.min_legal_ii(l)
}

/// Predicts latency and resource usage for `program` under `pragmas`.
/// Deterministic: identical inputs produce identical output.
pub fn estimate(
    program: &StructuredProgram,
    pragmas: &PragmaConfig,
    params: &EstimatorParams,
) -> Result<QoR, EstimateError> {
    let info = analyze_loops(program);
    let est = Estimator {
        program,
        pragmas,
        params,
        summaries: info.loops.into_iter().map(|s| (s.label.clone(), s)).collect(),
    };
    let env = program.type_env();
    let cost = est.region(&program.body, &env, false)?;

    let mut bram = 0u64;
    let mut array_bram = |name: &str, elem: ScalarType, len: usize| {
        let bits = elem.bits() as u64 * len as u64;
        let base = ceil_div(bits.max(1), 18_432);
        let factor = pragmas.partition.get(name).copied().unwrap_or(1).max(1) as u64;
        bram += base * factor;
    };
    for p in &program.params {
        if let ParamKind::Array { elem, len } = p.kind {
            array_bram(&p.name, elem, len);
        }
    }
    for a in &program.local_arrays {
        array_bram(&a.name, a.elem, a.len);
    }

    Ok(QoR {
        latency_cycles: cost.latency,
        dsp_used: cost.peak_dsp,
        lut_used: cost.lut,
        ff_used: cost.ff,
        bram_used: bram,
    })
}

/// Percentage of the device consumed: 25 times the sum of the four usage
/// ratios, so uniform quarter-utilization scores 25 and full utilization 100.
pub fn resource_percent(q: &QoR, dev: &DeviceProfile) -> f64 {
    25.0 * (q.dsp_used as f64 / dev.dsp_total as f64
        + q.lut_used as f64 / dev.lut_total as f64
        + q.ff_used as f64 / dev.ff_total as f64
        + q.bram_used as f64 / dev.bram_total as f64)
}

/// Latency/resource bounds of a comparison population.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NpiBounds {
    pub l_min: f64,
    pub l_max: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl NpiBounds {
    pub fn from_population(points: impl IntoIterator<Item = (f64, f64)>) -> Option<NpiBounds> {
        let mut b: Option<NpiBounds> = None;
        for (l, r) in points {
            b = Some(match b {
                None => NpiBounds { l_min: l, l_max: l, r_min: r, r_max: r },
                Some(p) => NpiBounds {
                    l_min: p.l_min.min(l),
                    l_max: p.l_max.max(l),
                    r_min: p.r_min.min(r),
                    r_max: p.r_max.max(r),
                },
            });
        }
        b
    }

    /// Weighted sum of the normalized latency and resource terms. A term
    /// with a degenerate range contributes 0.
    pub fn score(&self, l: f64, r: f64, w: Weights) -> f64 {
        let term = |x: f64, lo: f64, hi: f64| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
        w.w1 * term(l, self.l_min, self.l_max) + w.w2 * term(r, self.r_min, self.r_max)
    }
}

/// Normalized performance index of `q` within `population`: 0 at the
/// population minima, 1 at the maxima, lower is better.
pub fn npi(q: &QoR, population: &[QoR], dev: &DeviceProfile, w: Weights) -> f64 {
    let bounds = NpiBounds::from_population(
        population.iter().map(|p| (p.latency_cycles as f64, resource_percent(p, dev))),
    );
    match bounds {
        Some(b) => b.score(q.latency_cycles as f64, resource_percent(q, dev), w),
        None => 0.0,
    }
}

/// Anything comparable on the (latency, resource-percentage) plane.
pub trait Objective {
    fn latency(&self) -> u64;
    fn resource(&self) -> f64;
    fn id(&self) -> u64;
}

/// A bare scored point; the smallest useful [`Objective`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ScoredPoint {
    pub id: u64,
    pub latency_cycles: u64,
    pub r: f64,
}

impl Objective for ScoredPoint {
    fn latency(&self) -> u64 {
        self.latency_cycles
    }
    fn resource(&self) -> f64 {
        self.r
    }
    fn id(&self) -> u64 {
        self.id
    }
}

/// Keeps exactly the nondominated points: `p` survives unless some `q` is no
/// worse on both objectives and better on one. Ties on both objectives keep
/// the lowest id. Output is sorted by ascending latency.
pub fn pareto_front<T: Objective>(points: Vec<T>) -> Vec<T> {
    let mut pts = points;
    pts.sort_by(|a, b| {
        a.latency()
            .cmp(&b.latency())
            .then(a.resource().total_cmp(&b.resource()))
            .then(a.id().cmp(&b.id()))
    });
    let mut kept: Vec<T> = Vec::new();
    let mut best_r = f64::INFINITY;
    for p in pts {
        if p.resource() < best_r {
            best_r = p.resource();
            kept.push(p);
        }
    }
    kept
}

/// Grows a front by local moves: each round proposes `neighbors` of every
/// front point, merges, and re-filters. The result always dominates or
/// equals the input front pointwise, because the input points stay in the
/// candidate pool.
pub fn refine<T, F>(front: Vec<T>, rounds: u32, mut neighbors: F) -> Vec<T>
where
    T: Objective + Clone,
    F: FnMut(&T) -> Vec<T>,
{
    let mut cur = pareto_front(front);
    for _ in 0..rounds {
        let mut pool = cur.clone();
        for p in &cur {
            pool.extend(neighbors(p));
        }
        cur = pareto_front(pool);
    }
    cur
}

/// Area dominated by the front up to a reference corner (both objectives
/// minimized; the reference must be no better than any point). Larger is
/// better.
pub fn hypervolume<T: Objective>(front: &[T], ref_latency: f64, ref_r: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> =
        front.iter().map(|p| (p.latency() as f64, p.resource())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    let mut ceiling = ref_r;
    for (l, r) in pts {
        if l >= ref_latency || r >= ceiling {
            continue;
        }
        area += (ref_latency - l) * (ceiling - r);
        ceiling = r;
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(name: &str) -> Expr {
        Expr::LoopVar { name: name.into(), ty: ScalarType::U64 }
    }

    fn for_const(label: &str, var: &str, start: i64, stop: i64, step: i64, body: Vec<Node>) -> ForLoop {
        ForLoop { label: label.into(), var: var.into(), start, stop: Bound::Const(stop), step, body }
    }

    fn prog(
        params: Vec<Param>,
        locals: Vec<(String, ScalarType)>,
        body: Vec<Node>,
    ) -> StructuredProgram {
        StructuredProgram {
            name: "k".into(),
            params,
            locals,
            local_arrays: Vec::new(),
            functions: Vec::new(),
            body,
        }
    }

    /// trip-8 multiply-accumulate into an array cell:
    /// `o[0] = o[0] + a[v]*b[v]` (cross-iteration state lives in arrays).
    fn mac8() -> StructuredProgram {
        let body = vec![Node::Stmt(Statement::assign(
            Lvalue::elem_at("o", 0),
            Expr::bin(
                BinOp::Add,
                Expr::read_at("o", 0),
                Expr::bin(BinOp::Mul, Expr::read("a", v("v")), Expr::read("b", v("v"))),
            ),
        ))];
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("b", Direction::In, ScalarType::U64, 8),
                Param::array("o", Direction::Out, ScalarType::U64, 1),
            ],
            vec![],
            vec![Node::For(for_const("L0", "v", 0, 8, 1, body))],
        );
        validate_structured(&p).unwrap();
        p
    }

    fn est(p: &StructuredProgram, pragmas: &PragmaConfig) -> QoR {
        estimate(p, pragmas, &EstimatorParams::default()).unwrap()
    }

    #[test]
    fn empty_program_costs_nothing() {
        let p = prog(vec![], vec![], vec![]);
        assert_eq!(est(&p, &PragmaConfig::default()), QoR::default());
    }

    #[test]
    fn pipelined_loop_latency_formula() {
        // Body critical path: mul(4) + add(1) + add(1) = 6 cycles; disjoint
        // writes so II=1 is legal. 10 iterations: 1*9 + 6 = 15.
        let body = vec![Node::Stmt(Statement::assign(
            Lvalue::elem("o", v("i")),
            Expr::bin(
                BinOp::Add,
                Expr::bin(
                    BinOp::Add,
                    Expr::bin(BinOp::Mul, Expr::read("a", v("i")), Expr::read("b", v("i"))),
                    Expr::read("c", v("i")),
                ),
                Expr::read("d", v("i")),
            ),
        ))];
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 10),
                Param::array("b", Direction::In, ScalarType::U64, 10),
                Param::array("c", Direction::In, ScalarType::U64, 10),
                Param::array("d", Direction::In, ScalarType::U64, 10),
                Param::array("o", Direction::Out, ScalarType::U64, 10),
            ],
            vec![],
            vec![Node::For(for_const("L0", "i", 0, 10, 1, body))],
        );
        let mut pragmas = PragmaConfig::default();
        pragmas.pipeline.insert("L0".into(), 1);
        assert_eq!(est(&p, &pragmas).latency_cycles, 15);
    }

    #[test]
    fn unroll_multiplies_dsp_demand() {
        // One 64-bit product per iteration = 12 DSP; four concurrent copies = 48.
        let body = vec![Node::Stmt(Statement::assign(
            Lvalue::elem("o", v("i")),
            Expr::bin(BinOp::Mul, Expr::read("a", v("i")), Expr::read("b", v("i"))),
        ))];
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("b", Direction::In, ScalarType::U64, 8),
                Param::array("o", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(for_const("L0", "i", 0, 8, 1, body))],
        );
        assert_eq!(est(&p, &PragmaConfig::default()).dsp_used, 12);
        let mut pragmas = PragmaConfig::default();
        pragmas.unroll.insert("L0".into(), 4);
        let q = est(&p, &pragmas);
        assert_eq!(q.dsp_used, 48);
        // Four independent products in 4 cycles, two chunks.
        assert_eq!(q.latency_cycles, 8);
    }

    #[test]
    fn mac_rolls_cheap_and_slow() {
        // Rolled: one multiplier, 8 × (4+1) cycles. Fully unrolled: eight
        // concurrent multipliers, adds chain through the accumulator.
        let p = mac8();
        let rolled = est(&p, &PragmaConfig::default());
        assert_eq!(rolled.dsp_used, 12);
        assert_eq!(rolled.latency_cycles, 40);

        let mut pragmas = PragmaConfig::default();
        pragmas.unroll.insert("L0".into(), 8);
        let unrolled = est(&p, &pragmas);
        assert_eq!(unrolled.dsp_used, 96);
        assert_eq!(unrolled.latency_cycles, 12);

        assert!(rolled.dsp_used < unrolled.dsp_used);
        assert!(rolled.latency_cycles > unrolled.latency_cycles);
    }

    #[test]
    fn carried_dependence_floors_the_ii() {
        // t[v] = t[v-1] * c: distance-1 recurrence through a 4-cycle multiply.
        let body = vec![Node::Stmt(Statement::assign(
            Lvalue::elem("t", v("i")),
            Expr::bin(
                BinOp::Mul,
                Expr::read("t", Expr::bin(BinOp::Sub, v("i"), Expr::index_lit(1))),
                Expr::var("c"),
            ),
        ))];
        let p = prog(
            vec![
                Param::scalar("c", ScalarType::U64, u128::MAX >> 64),
                Param::array("t", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(for_const("L0", "i", 1, 8, 1, body))],
        );
        let mut pragmas = PragmaConfig::default();
        pragmas.pipeline.insert("L0".into(), 1);
        // Legal II = 1 (distance) × 4 (multiply): 4*6 + 4 = 28.
        assert_eq!(est(&p, &pragmas).latency_cycles, 28);
        // An explicit hazard-free assertion on `t` lifts the floor.
        pragmas.dependence_free.insert("t".into());
        assert_eq!(est(&p, &pragmas).latency_cycles, 1 * 6 + 4);
    }

    #[test]
    fn nested_loops_compose_multiplicatively() {
        let inner_body = vec![Node::Stmt(Statement::assign(
            Lvalue::elem(
                "o",
                Expr::bin(BinOp::Add, Expr::bin(BinOp::Mul, v("i"), Expr::index_lit(4)), v("j")),
            ),
            Expr::bin(BinOp::Add, Expr::read("a", v("j")), Expr::var("c")),
        ))];
        let inner = for_const("L1", "j", 0, 4, 1, inner_body);
        let outer = for_const("L0", "i", 0, 2, 1, vec![Node::For(inner)]);
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 4),
                Param::scalar("c", ScalarType::U64, u128::MAX >> 64),
                Param::array("o", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(outer)],
        );
        // Body latency 1 (one add), inner 4×1, outer 2×4.
        assert_eq!(est(&p, &PragmaConfig::default()).latency_cycles, 8);
    }

    #[test]
    fn wide_multiply_statement_uses_a_full_multiplier() {
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 1),
                Param::array("b", Direction::In, ScalarType::U64, 1),
                Param::array("hi", Direction::Out, ScalarType::U64, 1),
                Param::array("lo", Direction::Out, ScalarType::U64, 1),
            ],
            vec![],
            vec![Node::Stmt(Statement::wide(
                Lvalue::elem_at("hi", 0),
                Lvalue::elem_at("lo", 0),
                WideOp::MulWide,
                ScalarType::U64,
                vec![Expr::read_at("a", 0), Expr::read_at("b", 0)],
            ))],
        );
        let q = est(&p, &PragmaConfig::default());
        assert_eq!(q.dsp_used, 12);
        assert_eq!(q.latency_cycles, 5);
    }

    #[test]
    fn independent_statements_overlap() {
        // Two independent products overlap fully: latency 4, DSP 24. A third
        // statement consuming both adds one cycle.
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 2),
                Param::array("o", Direction::Out, ScalarType::U64, 3),
            ],
            vec![("x".into(), ScalarType::U64), ("y".into(), ScalarType::U64)],
            vec![
                Node::Stmt(Statement::assign(
                    Lvalue::local("x"),
                    Expr::bin(BinOp::Mul, Expr::read_at("a", 0), Expr::read_at("a", 0)),
                )),
                Node::Stmt(Statement::assign(
                    Lvalue::local("y"),
                    Expr::bin(BinOp::Mul, Expr::read_at("a", 1), Expr::read_at("a", 1)),
                )),
                Node::Stmt(Statement::assign(
                    Lvalue::elem_at("o", 0),
                    Expr::bin(BinOp::Add, Expr::var("x"), Expr::var("y")),
                )),
            ],
        );
        let q = est(&p, &PragmaConfig::default());
        assert_eq!(q.latency_cycles, 5);
        assert_eq!(q.dsp_used, 24);
    }

    #[test]
    fn bram_counts_and_partitioning() {
        // 8 × u64 = 512 bits -> 1 BRAM per array; cyclic partition by 4
        // multiplies the banks.
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("o", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::Stmt(Statement::assign(Lvalue::elem_at("o", 0), Expr::read_at("a", 0)))],
        );
        assert_eq!(est(&p, &PragmaConfig::default()).bram_used, 2);
        let mut pragmas = PragmaConfig::default();
        pragmas.partition.insert("a".into(), 4);
        assert_eq!(est(&p, &pragmas).bram_used, 5);

        // 4096 × u64 = 262144 bits -> ceil(262144/18432) = 15.
        let big = prog(
            vec![Param::array("t", Direction::Out, ScalarType::U64, 4096)],
            vec![],
            vec![],
        );
        assert_eq!(est(&big, &PragmaConfig::default()).bram_used, 15);
    }

    #[test]
    fn pipelining_registers_the_datapath() {
        let body = vec![Node::Stmt(Statement::assign(
            Lvalue::elem("o", v("i")),
            Expr::bin(BinOp::Add, Expr::read("a", v("i")), Expr::var("c")),
        ))];
        let mk = |pragmas: &PragmaConfig| {
            let p = prog(
                vec![
                    Param::array("a", Direction::In, ScalarType::U64, 8),
                    Param::scalar("c", ScalarType::U64, u128::MAX >> 64),
                    Param::array("o", Direction::Out, ScalarType::U64, 8),
                ],
                vec![],
                vec![Node::For(for_const("L0", "i", 0, 8, 1, body.clone()))],
            );
            est(&p, pragmas)
        };
        let plain = mk(&PragmaConfig::default());
        assert_eq!(plain.ff_used, 0);
        assert_eq!(plain.lut_used, 64);
        let mut pragmas = PragmaConfig::default();
        pragmas.pipeline.insert("L0".into(), 1);
        let piped = mk(&pragmas);
        assert_eq!(piped.ff_used, piped.lut_used);
    }

    #[test]
    fn unroll_factor_must_divide() {
        let p = mac8();
        let mut pragmas = PragmaConfig::default();
        pragmas.unroll.insert("L0".into(), 3);
        let err = estimate(&p, &pragmas, &EstimatorParams::default()).unwrap_err();
        assert_eq!(err, EstimateError::BadUnroll("L0".into(), 3, 8));
    }

    #[test]
    fn missing_table_entry_is_reported() {
        let p = mac8();
        let mut params = EstimatorParams::default();
        params.latency.remove("mul");
        let err = estimate(&p, &PragmaConfig::default(), &params).unwrap_err();
        assert_eq!(err, EstimateError::MissingEntry("latency.mul".into()));
    }

    #[test]
    fn estimates_are_deterministic() {
        let p = mac8();
        let mut pragmas = PragmaConfig::default();
        pragmas.unroll.insert("L0".into(), 2);
        pragmas.partition.insert("a".into(), 2);
        assert_eq!(est(&p, &pragmas), est(&p, &pragmas));
    }

    #[test]
    fn unroll_monotonicity_without_hazards() {
        let body = vec![Node::Stmt(Statement::assign(
            Lvalue::elem("o", v("i")),
            Expr::bin(BinOp::Mul, Expr::read("a", v("i")), Expr::read("b", v("i"))),
        ))];
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 16),
                Param::array("b", Direction::In, ScalarType::U64, 16),
                Param::array("o", Direction::Out, ScalarType::U64, 16),
            ],
            vec![],
            vec![Node::For(for_const("L0", "i", 0, 16, 1, body))],
        );
        let mut prev = est(&p, &PragmaConfig::default());
        for f in [2u32, 4, 8, 16] {
            let mut pragmas = PragmaConfig::default();
            pragmas.unroll.insert("L0".into(), f);
            let q = est(&p, &pragmas);
            assert!(q.latency_cycles <= prev.latency_cycles, "factor {f}");
            assert!(q.dsp_used >= prev.dsp_used, "factor {f}");
            prev = q;
        }
    }

    #[test]
    fn resource_percent_is_exact() {
        let dev = DeviceProfile::default();
        let q = QoR {
            latency_cycles: 1,
            dsp_used: dev.dsp_total / 4,
            lut_used: dev.lut_total / 4,
            ff_used: dev.ff_total / 4,
            bram_used: dev.bram_total / 4,
        };
        assert!((resource_percent(&q, &dev) - 25.0).abs() < 1e-12);
        assert_eq!(resource_percent(&QoR::default(), &dev), 0.0);
        let full = QoR {
            latency_cycles: 1,
            dsp_used: dev.dsp_total,
            lut_used: dev.lut_total,
            ff_used: dev.ff_total,
            bram_used: dev.bram_total,
        };
        assert!((resource_percent(&full, &dev) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn npi_pins_extremes_and_splits_the_middle() {
        let dev = DeviceProfile { dsp_total: 100, ..DeviceProfile::default() };
        let mk = |dsp: u64, latency: u64| QoR { latency_cycles: latency, dsp_used: dsp, ..QoR::default() };
        // r = 25·dsp/100: dsp 40 -> 10, dsp 20 -> 5.
        let a = mk(40, 100);
        let b = mk(20, 200);
        let pop = vec![a, b];
        let w = Weights::default();
        assert!((npi(&a, &pop, &dev, w) - 0.5).abs() < 1e-12);
        assert!((npi(&b, &pop, &dev, w) - 0.5).abs() < 1e-12);

        let best = mk(20, 100);
        let worst = mk(40, 200);
        let pop = vec![best, worst, a];
        assert_eq!(npi(&best, &pop, &dev, w), 0.0);
        assert_eq!(npi(&worst, &pop, &dev, w), 1.0);
    }

    #[test]
    fn npi_degenerate_ranges_contribute_zero() {
        let dev = DeviceProfile::default();
        let q = QoR { latency_cycles: 7, dsp_used: 3, ..QoR::default() };
        // Single-point population: both ranges degenerate.
        assert_eq!(npi(&q, &[q], &dev, Weights::default()), 0.0);
    }

    #[test]
    fn weights_validate() {
        assert!(Weights::new(0.3, 0.7).is_ok());
        assert!(Weights::new(0.5, 0.6).is_err());
        assert!(Weights::new(-0.2, 1.2).is_err());
    }

    fn sp(id: u64, l: u64, r: f64) -> ScoredPoint {
        ScoredPoint { id, latency_cycles: l, r }
    }

    #[test]
    fn pareto_drops_dominated_points() {
        let pts = vec![sp(0, 10, 5.0), sp(1, 5, 10.0), sp(2, 7, 7.0), sp(3, 10, 10.0)];
        let front = pareto_front(pts);
        let ids: Vec<u64> = front.iter().map(|p| p.id).collect();
        assert_eq!(ids, [1, 2, 0]);
    }

    #[test]
    fn pareto_duplicates_keep_lowest_id() {
        let pts = vec![sp(4, 5, 5.0), sp(1, 5, 5.0), sp(9, 5, 5.0)];
        let front = pareto_front(pts);
        assert_eq!(front.len(), 1);
        assert_eq!(front[0].id, 1);
    }

    #[test]
    fn pareto_matches_quadratic_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..=60);
            let pts: Vec<ScoredPoint> = (0..n)
                .map(|id| sp(id, rng.gen_range(0..40), rng.gen_range(0..40) as f64))
                .collect();
            let mut expect: Vec<u64> = Vec::new();
            for p in &pts {
                let dominated = pts.iter().any(|q| {
                    q.latency_cycles <= p.latency_cycles
                        && q.r <= p.r
                        && (q.latency_cycles < p.latency_cycles || q.r < p.r)
                });
                let duplicate_of_lower = pts.iter().any(|q| {
                    q.id < p.id && q.latency_cycles == p.latency_cycles && q.r == p.r
                });
                if !dominated && !duplicate_of_lower {
                    expect.push(p.id);
                }
            }
            expect.sort_unstable();
            let mut got: Vec<u64> = pareto_front(pts).iter().map(|p| p.id).collect();
            got.sort_unstable();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn refine_absorbs_dominating_neighbors() {
        let front = vec![sp(0, 10, 10.0)];
        // Neighbor strictly better on both axes replaces the seed point.
        let out = refine(front, 1, |p| vec![sp(p.id + 100, p.latency_cycles - 2, p.r - 2.0)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, 100);

        // Zero rounds: unchanged.
        let out = refine(vec![sp(0, 10, 10.0)], 0, |_| vec![sp(1, 1, 1.0)]);
        assert_eq!(out[0].id, 0);
    }

    #[test]
    fn hypervolume_grows_with_refinement() {
        let (rl, rr) = (20.0, 20.0);
        let mut front = vec![sp(0, 10, 10.0), sp(1, 5, 15.0)];
        let mut hv = hypervolume(&front, rl, rr);
        assert!((hv - ((20.0 - 5.0) * (20.0 - 15.0) + (20.0 - 10.0) * (15.0 - 10.0))).abs() < 1e-12);
        for round in 0..3 {
            front = refine(front, 1, |p| {
                vec![sp(p.id() * 7 + 13, p.latency().saturating_sub(1), p.resource() - 0.5)]
            });
            let next = hypervolume(&front, rl, rr);
            assert!(next >= hv, "round {round}");
            hv = next;
        }
    }

    #[test]
    fn config_files_override_tables() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("ops.toml");
        let mut params = EstimatorParams::default();
        params.latency.insert("mul".into(), 9);
        std::fs::write(&toml_path, toml::to_string(&params).unwrap()).unwrap();
        let loaded = EstimatorParams::from_file(&toml_path).unwrap();
        assert_eq!(loaded, params);

        let json_path = dir.path().join("dev.json");
        let dev = DeviceProfile { name: "test".into(), dsp_total: 10, lut_total: 10, ff_total: 10, bram_total: 10 };
        std::fs::write(&json_path, serde_json::to_string(&dev).unwrap()).unwrap();
        assert_eq!(DeviceProfile::from_file(&json_path).unwrap(), dev);

        // The rolled MAC takes 8 × (9+1) cycles under the slower multiplier.
        let q = estimate(&mac8(), &PragmaConfig::default(), &loaded).unwrap();
        assert_eq!(q.latency_cycles, 80);
    }

    #[test]
    fn over_budget_flags_not_clamps() {
        let dev = DeviceProfile { dsp_total: 10, ..DeviceProfile::default() };
        let q = QoR { dsp_used: 50, ..QoR::default() };
        assert_eq!(dev.over_budget(&q), ["dsp"]);
        assert_eq!(q.dsp_used, 50);
    }
}
