//! Loop feature extraction and bound staticization.
//!
//! `analyze_loops` reports, per counted loop: trip count, nesting depth,
//! loop-carried dependences with their minimum iteration distance, per-array
//! access strides, and whether the loop heads a perfect nest. Dependence
//! testing enumerates iteration pairs exactly (trip counts here are small);
//! any index that cannot be evaluated to a constant per iteration — shifts or
//! masks of a counter, runtime scalars — is treated conservatively as a
//! carried dependence of distance 1. Scalar locals participate only through
//! read-before-write flow: write-after-write on a scalar is renameable and
//! never blocks a schedule.
//!
//! `staticize_bounds` rewrites runtime-variable loop bounds to their declared
//! maxima and predicates every escaping write with `cmovznz`, so the padded
//! iterations are effect-free without introducing a data-dependent branch.

use crate::ir::*;
use std::collections::{BTreeMap, BTreeSet};

/// Facts about one counted loop, consumed by directive legality checks and
/// the latency model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct LoopSummary {
    pub label: String,
    pub var: String,
    pub trip_count: i64,
    /// Nesting depth; 0 for top-level loops.
    pub depth: usize,
    pub carried: bool,
    /// Minimum iteration distance over all carried dependences.
    pub min_distance: Option<i64>,
    /// Flattened body positions (statements and calls, pre-order) that sit on
    /// a carried dependence.
    pub carried_stmts: BTreeSet<usize>,
    /// Arrays with a loop-carried access conflict.
    pub carried_arrays: BTreeSet<String>,
    /// Scalars whose value flows between iterations (plus `call:*` markers
    /// for opaque calls). These hazards are real — no directive removes them.
    pub carried_scalars: BTreeSet<String>,
    /// Per-iteration element stride for each array the body touches; `None`
    /// marks irregular access.
    pub strides: BTreeMap<String, Option<i64>>,
    /// True when every level of the nest under this loop holds either a
    /// single inner loop or only statements.
    pub perfect_nest: bool,
}

impl LoopSummary {
    /// Iteration distance floor usable for scheduling; 1 when nothing is
    /// known to be carried.
    pub fn distance_or(&self, fallback: i64) -> i64 {
        self.min_distance.unwrap_or(fallback)
    }
}

/// Whole-program loop analysis plus outline-eligible groups of structurally
/// identical top-level loops (labels, in program order).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct LoopInfo {
    pub loops: Vec<LoopSummary>,
    pub outline_groups: Vec<Vec<String>>,
}

impl LoopInfo {
    pub fn get(&self, label: &str) -> Option<&LoopSummary> {
        self.loops.iter().find(|l| l.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AccessKind {
    Read,
    Write,
}

/// One array access inside a loop body: index expression, kind, and the
/// flattened position of the owning statement.
struct ArrayAccess {
    array: String,
    index: Expr,
    kind: AccessKind,
    pos: usize,
}

/// Everything a dependence test needs about one loop body.
struct BodyFacts {
    arrays: Vec<ArrayAccess>,
    /// scalar name -> positions of reads / writes, flattened order.
    scalar_reads: BTreeMap<String, Vec<usize>>,
    scalar_writes: BTreeMap<String, Vec<usize>>,
    /// Loop variables bound inside the body, with their value sets.
    inner_vars: Vec<(String, Vec<i64>)>,
    /// Positions of calls (opaque: args conservatively conflict).
    calls: Vec<(usize, Vec<String>)>,
    n_positions: usize,
}

fn collect_body(nodes: &[Node], facts: &mut BodyFacts) {
    for n in nodes {
        match n {
            Node::Stmt(s) => {
                let pos = facts.n_positions;
                facts.n_positions += 1;
                for e in s.operand_exprs() {
                    e.walk(&mut |sub| match sub {
                        Expr::Read { array, index } => facts.arrays.push(ArrayAccess {
                            array: array.clone(),
                            index: (**index).clone(),
                            kind: AccessKind::Read,
                            pos,
                        }),
                        Expr::Var { name } => {
                            facts.scalar_reads.entry(name.clone()).or_default().push(pos)
                        }
                        _ => {}
                    });
                }
                for t in &s.targets {
                    match t {
                        Lvalue::Elem { array, index } => facts.arrays.push(ArrayAccess {
                            array: array.clone(),
                            index: (**index).clone(),
                            kind: AccessKind::Write,
                            pos,
                        }),
                        Lvalue::Local { name } => {
                            facts.scalar_writes.entry(name.clone()).or_default().push(pos)
                        }
                    }
                }
            }
            Node::For(l) => {
                facts.inner_vars.push((l.var.clone(), l.iter_values()));
                collect_body(&l.body, facts);
            }
            Node::Call { args, .. } => {
                let pos = facts.n_positions;
                facts.n_positions += 1;
                facts.calls.push((pos, args.clone()));
            }
        }
    }
}

/// Free loop variables of `e` (counters only; scalars are not enumerable).
fn counter_vars(e: &Expr, out: &mut BTreeSet<String>) {
    e.walk(&mut |sub| {
        if let Expr::LoopVar { name, .. } = sub {
            out.insert(name.clone());
        }
    });
}

/// True when `e` applies a bit-level operator (mask, shift, negation) to a
/// subtree containing a counter. Such indices wrap in ways the distance
/// search must not trust, so they fall back to the conservative answer.
pub(crate) fn bit_twiddled(e: &Expr) -> bool {
    let mut found = false;
    e.walk(&mut |sub| {
        let twiddling = matches!(
            sub,
            Expr::Not(_)
                | Expr::Bin {
                    op: BinOp::And | BinOp::Or | BinOp::Xor | BinOp::Shl | BinOp::Shr,
                    ..
                }
        );
        if twiddling {
            let mut vars = BTreeSet::new();
            counter_vars(sub, &mut vars);
            found |= !vars.is_empty();
        }
    });
    found
}

/// True when `e` contains anything `eval_index` cannot fold given counter
/// values — runtime scalars or non-affine operators.
fn is_enumerable(e: &Expr, known: &BTreeMap<String, Vec<i64>>) -> bool {
    if bit_twiddled(e) {
        return false;
    }
    let mut vars = BTreeSet::new();
    counter_vars(e, &mut vars);
    if !vars.iter().all(|v| known.contains_key(v)) {
        return false;
    }
    // Probe with the first value of every counter: eval_index returns None
    // for unsupported operators regardless of the environment.
    let env: IndexEnv = known
        .iter()
        .filter(|(k, _)| vars.contains(*k))
        .map(|(k, vs)| (k.clone(), *vs.first().unwrap_or(&0)))
        .collect();
    eval_index(e, &env).is_some()
}

/// Cartesian product of the named counters' value sets, capped. `None` when
/// the product exceeds the cap and enumeration would be unsound to truncate.
fn env_product(
    vars: &BTreeSet<String>,
    known: &BTreeMap<String, Vec<i64>>,
    cap: usize,
) -> Option<Vec<IndexEnv>> {
    let mut envs: Vec<IndexEnv> = vec![IndexEnv::new()];
    for v in vars {
        let values = known.get(v)?;
        let mut next = Vec::with_capacity(envs.len() * values.len().max(1));
        for env in &envs {
            for &val in values {
                let mut e = env.clone();
                e.insert(v.clone(), val);
                next.push(e);
            }
        }
        if next.len() > cap {
            return None;
        }
        envs = next;
    }
    Some(envs)
}

/// Result of testing one access pair.
enum PairDep {
    None,
    Carried(i64),
}

/// Smallest iteration distance of `var` at which the two indices can collide,
/// holding every other counter fixed to any common assignment.
fn pair_distance(
    a: &Expr,
    b: &Expr,
    var: &str,
    values: &[i64],
    known: &BTreeMap<String, Vec<i64>>,
) -> PairDep {
    if !is_enumerable(a, known) || !is_enumerable(b, known) {
        return PairDep::Carried(1);
    }
    let mut others = BTreeSet::new();
    counter_vars(a, &mut others);
    counter_vars(b, &mut others);
    others.remove(var);
    let envs = match env_product(&others, known, 4096) {
        Some(e) => e,
        None => return PairDep::Carried(1),
    };
    let n = values.len();
    for d in 1..n as i64 {
        for k in 0..(n as i64 - d) {
            let (v1, v2) = (values[k as usize], values[(k + d) as usize]);
            for env in &envs {
                let mut e1 = env.clone();
                e1.insert(var.to_string(), v1);
                let mut e2 = env.clone();
                e2.insert(var.to_string(), v2);
                // Both orientations: earlier-a vs later-b and the reverse.
                let (a1, b2) = (eval_index(a, &e1), eval_index(b, &e2));
                let (a2, b1) = (eval_index(a, &e2), eval_index(b, &e1));
                if (a1.is_some() && a1 == b2) || (a2.is_some() && a2 == b1) {
                    return PairDep::Carried(d);
                }
            }
        }
    }
    PairDep::None
}

fn analyze_one(l: &ForLoop, depth: usize, outer: &BTreeMap<String, Vec<i64>>) -> LoopSummary {
    let values = l.iter_values();
    let mut facts = BodyFacts {
        arrays: Vec::new(),
        scalar_reads: BTreeMap::new(),
        scalar_writes: BTreeMap::new(),
        inner_vars: Vec::new(),
        calls: Vec::new(),
        n_positions: 0,
    };
    collect_body(&l.body, &mut facts);

    let mut known = outer.clone();
    known.insert(l.var.clone(), values.clone());
    for (v, vals) in &facts.inner_vars {
        known.insert(v.clone(), vals.clone());
    }

    let mut carried_stmts = BTreeSet::new();
    let mut carried_arrays = BTreeSet::new();
    let mut carried_scalars = BTreeSet::new();
    let mut min_distance: Option<i64> = None;
    let mut record = |d: i64, positions: &[usize]| {
        min_distance = Some(min_distance.map_or(d, |m: i64| m.min(d)));
        carried_stmts.extend(positions.iter().copied());
    };

    for i in 0..facts.arrays.len() {
        for j in i..facts.arrays.len() {
            let (x, y) = (&facts.arrays[i], &facts.arrays[j]);
            if x.array != y.array
                || (x.kind == AccessKind::Read && y.kind == AccessKind::Read)
            {
                continue;
            }
            if let PairDep::Carried(d) =
                pair_distance(&x.index, &y.index, &l.var, &values, &known)
            {
                record(d, &[x.pos, y.pos]);
                carried_arrays.insert(x.array.clone());
            }
        }
    }

    // Scalar flow: a read not preceded by a same-iteration write consumes the
    // previous iteration's value. Reads inside the writing statement count —
    // operands are read before the target is stored.
    for (name, writes) in &facts.scalar_writes {
        let first_write = *writes.iter().min().unwrap();
        if let Some(reads) = facts.scalar_reads.get(name) {
            for &r in reads {
                if r <= first_write {
                    record(1, &[r, first_write]);
                    carried_scalars.insert(name.clone());
                    break;
                }
            }
        }
    }

    // Calls are opaque: assume every argument array conflicts iteration to
    // iteration.
    for (pos, args) in &facts.calls {
        record(1, &[*pos]);
        carried_arrays.extend(args.iter().cloned());
        carried_scalars.insert("call".into());
    }

    // A nested loop with a runtime bound defeats enumeration entirely.
    if facts.inner_vars.iter().any(|(_, vs)| vs.is_empty()) && l.const_trip_count().is_some() {
        let has_var_bound_inner = {
            fn scan(nodes: &[Node]) -> bool {
                nodes.iter().any(|n| match n {
                    Node::For(f) => matches!(f.stop, Bound::Var { .. }) || scan(&f.body),
                    _ => false,
                })
            }
            scan(&l.body)
        };
        if has_var_bound_inner {
            record(1, &[]);
            carried_scalars.insert("bound".into());
        }
    }

    // Stride per array: agreeing affine step (in elements per iteration of
    // this loop) across all accesses, else irregular.
    let mut strides: BTreeMap<String, Option<i64>> = BTreeMap::new();
    for acc in &facts.arrays {
        let stride = as_affine(&acc.index).and_then(|aff| match aff.var {
            Some(ref v) if v == &l.var => aff.scale.checked_mul(l.step),
            Some(_) => None,
            None => Some(0),
        });
        strides
            .entry(acc.array.clone())
            .and_modify(|s| {
                if *s != stride {
                    *s = None;
                }
            })
            .or_insert(stride);
    }

    let perfect_nest = {
        fn perfect(body: &[Node]) -> bool {
            match body {
                [Node::For(inner)] => perfect(&inner.body),
                _ => body.iter().all(|n| matches!(n, Node::Stmt(_))),
            }
        }
        perfect(&l.body)
    };

    LoopSummary {
        label: l.label.clone(),
        var: l.var.clone(),
        trip_count: l.const_trip_count().unwrap_or(0),
        depth,
        carried: min_distance.is_some(),
        min_distance,
        carried_stmts,
        carried_arrays,
        carried_scalars,
        strides,
        perfect_nest,
    }
}

/// Canonical shape of a loop for outline grouping: the loop with arrays,
/// counters, and label renamed to positional placeholders. Scalars keep
/// their names, so loops grouped together stay interchangeable even though
/// outlining itself handles only scalar-free bodies.
pub(crate) fn loop_shape(l: &ForLoop) -> String {
    let mut order: Vec<String> = Vec::new();
    let mut note = |a: &str| {
        if !order.iter().any(|x| x == a) {
            order.push(a.to_string());
        }
    };
    fn walk_nodes(nodes: &[Node], note: &mut dyn FnMut(&str)) {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    for e in s.operand_exprs() {
                        e.walk(&mut |sub| {
                            if let Expr::Read { array, .. } = sub {
                                note(array);
                            }
                        });
                    }
                    for t in &s.targets {
                        if let Lvalue::Elem { array, .. } = t {
                            note(array);
                        }
                    }
                }
                Node::For(f) => walk_nodes(&f.body, note),
                Node::Call { args, .. } => args.iter().for_each(|a| note(a)),
            }
        }
    }
    walk_nodes(&l.body, &mut note);

    let mut canon = l.clone();
    let renames: BTreeMap<String, String> = order
        .iter()
        .enumerate()
        .map(|(i, a)| (a.clone(), format!("$a{i}")))
        .collect();
    rename_in_loop(&mut canon, &renames);

    let mut vmap: BTreeMap<String, String> = BTreeMap::new();
    fn collect_vars(l: &ForLoop, vmap: &mut BTreeMap<String, String>) {
        let next = format!("$v{}", vmap.len());
        vmap.entry(l.var.clone()).or_insert(next);
        for n in &l.body {
            if let Node::For(f) = n {
                collect_vars(f, vmap);
            }
        }
    }
    collect_vars(&canon, &mut vmap);
    let mut next_label = 0;
    canon_counters(&mut canon, &vmap, &mut next_label);
    serde_json::to_string(&canon).expect("loop serializes")
}

/// Rewrites labels to pre-order placeholders and counters per `vmap`.
fn canon_counters(l: &mut ForLoop, vmap: &BTreeMap<String, String>, next_label: &mut usize) {
    l.label = format!("$L{next_label}");
    *next_label += 1;
    if let Some(r) = vmap.get(&l.var) {
        l.var = r.clone();
    }
    fn fix_expr(e: &mut Expr, vmap: &BTreeMap<String, String>) {
        match e {
            Expr::LoopVar { name, .. } => {
                if let Some(r) = vmap.get(name) {
                    *name = r.clone();
                }
            }
            Expr::Read { index, .. } => fix_expr(index, vmap),
            Expr::Not(a) | Expr::Trunc { arg: a, .. } | Expr::Zext { arg: a, .. } => {
                fix_expr(a, vmap)
            }
            Expr::Bin { lhs, rhs, .. } => {
                fix_expr(lhs, vmap);
                fix_expr(rhs, vmap);
            }
            Expr::Cmov { flag, if_zero, if_nonzero, .. } => {
                fix_expr(flag, vmap);
                fix_expr(if_zero, vmap);
                fix_expr(if_nonzero, vmap);
            }
            Expr::Lit { .. } | Expr::Var { .. } => {}
        }
    }
    for n in &mut l.body {
        match n {
            Node::Stmt(s) => {
                match &mut s.rhs {
                    Rhs::Plain(e) => fix_expr(e, vmap),
                    Rhs::Wide { args, .. } => args.iter_mut().for_each(|a| fix_expr(a, vmap)),
                }
                for t in &mut s.targets {
                    if let Lvalue::Elem { index, .. } = t {
                        fix_expr(index, vmap);
                    }
                }
            }
            Node::For(f) => canon_counters(f, vmap, next_label),
            Node::Call { .. } => {}
        }
    }
}

fn rename_in_expr(e: &mut Expr, renames: &BTreeMap<String, String>) {
    match e {
        Expr::Read { array, index } => {
            if let Some(r) = renames.get(array) {
                *array = r.clone();
            }
            rename_in_expr(index, renames);
        }
        Expr::Not(a) | Expr::Trunc { arg: a, .. } | Expr::Zext { arg: a, .. } => {
            rename_in_expr(a, renames)
        }
        Expr::Bin { lhs, rhs, .. } => {
            rename_in_expr(lhs, renames);
            rename_in_expr(rhs, renames);
        }
        Expr::Cmov { flag, if_zero, if_nonzero, .. } => {
            rename_in_expr(flag, renames);
            rename_in_expr(if_zero, renames);
            rename_in_expr(if_nonzero, renames);
        }
        _ => {}
    }
}

fn rename_in_nodes(nodes: &mut [Node], renames: &BTreeMap<String, String>) {
    for n in nodes {
        match n {
            Node::Stmt(s) => {
                match &mut s.rhs {
                    Rhs::Plain(e) => rename_in_expr(e, renames),
                    Rhs::Wide { args, .. } => {
                        args.iter_mut().for_each(|a| rename_in_expr(a, renames))
                    }
                }
                for t in &mut s.targets {
                    if let Lvalue::Elem { array, index } = t {
                        if let Some(r) = renames.get(array) {
                            *array = r.clone();
                        }
                        rename_in_expr(index, renames);
                    }
                }
            }
            Node::For(f) => rename_in_nodes(&mut f.body, renames),
            Node::Call { args, .. } => {
                for a in args {
                    if let Some(r) = renames.get(a) {
                        *a = r.clone();
                    }
                }
            }
        }
    }
}

fn rename_in_loop(l: &mut ForLoop, renames: &BTreeMap<String, String>) {
    rename_in_nodes(&mut l.body, renames);
}

/// Arrays a loop touches, in first-use order — the argument list an outlined
/// call site passes.
pub fn loop_array_order(l: &ForLoop) -> Vec<String> {
    let mut order = Vec::new();
    fn walk(nodes: &[Node], order: &mut Vec<String>) {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    for e in s.operand_exprs() {
                        e.walk(&mut |sub| {
                            if let Expr::Read { array, .. } = sub {
                                if !order.iter().any(|x| x == array) {
                                    order.push(array.clone());
                                }
                            }
                        });
                    }
                    for t in &s.targets {
                        if let Lvalue::Elem { array, .. } = t {
                            if !order.iter().any(|x| x == array) {
                                order.push(array.clone());
                            }
                        }
                    }
                }
                Node::For(f) => walk(&f.body, order),
                Node::Call { args, .. } => {
                    for a in args {
                        if !order.iter().any(|x| x == a) {
                            order.push(a.clone());
                        }
                    }
                }
            }
        }
    }
    walk(&l.body, &mut order);
    order
}

pub fn analyze_loops(s: &StructuredProgram) -> LoopInfo {
    let mut loops = Vec::new();
    fn walk(
        nodes: &[Node],
        depth: usize,
        outer: &BTreeMap<String, Vec<i64>>,
        out: &mut Vec<LoopSummary>,
    ) {
        for n in nodes {
            if let Node::For(l) = n {
                out.push(analyze_one(l, depth, outer));
                let mut scope = outer.clone();
                scope.insert(l.var.clone(), l.iter_values());
                walk(&l.body, depth + 1, &scope, out);
            }
        }
    }
    walk(&s.body, 0, &BTreeMap::new(), &mut loops);

    // Group structurally identical top-level loops for outlining.
    let mut by_shape: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for n in &s.body {
        if let Node::For(l) = n {
            by_shape.entry(loop_shape(l)).or_default().push(l.label.clone());
        }
    }
    let mut outline_groups: Vec<Vec<String>> =
        by_shape.into_values().filter(|g| g.len() >= 2).collect();
    outline_groups.sort();

    LoopInfo { loops, outline_groups }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum StaticizeError {
    #[error("loop `{0}`: bound `{1}` has no declared maximum")]
    NoDeclaredMaximum(String, String),
    #[error("loop `{0}`: {1}")]
    Unsupported(String, String),
    #[error("staticized program failed validation: {0}")]
    Invalid(#[from] ValidateError),
}

/// Scalar names assigned (recursively) by these nodes.
fn assigned_scalars(nodes: &[Node], out: &mut BTreeSet<String>) {
    for n in nodes {
        match n {
            Node::Stmt(s) => {
                for t in &s.targets {
                    if let Lvalue::Local { name } = t {
                        out.insert(name.clone());
                    }
                }
            }
            Node::For(f) => assigned_scalars(&f.body, out),
            Node::Call { .. } => {}
        }
    }
}

/// Scalar names read (recursively) by these nodes.
fn read_scalars(nodes: &[Node], out: &mut BTreeSet<String>) {
    for n in nodes {
        match n {
            Node::Stmt(s) => {
                for e in s.operand_exprs() {
                    e.walk(&mut |sub| {
                        if let Expr::Var { name } = sub {
                            out.insert(name.clone());
                        }
                    });
                }
            }
            Node::For(f) => read_scalars(&f.body, out),
            Node::Call { .. } => {}
        }
    }
}

pub(crate) struct Staticizer {
    params: Vec<Param>,
    pub(crate) new_locals: Vec<(String, ScalarType)>,
    fresh: usize,
}

impl Staticizer {
    /// `existing` must cover every declared local so fresh guard names never
    /// collide, including across repeated rewrites of the same program.
    pub(crate) fn new(params: &[Param], existing: &[(String, ScalarType)]) -> Staticizer {
        let next = existing
            .iter()
            .filter_map(|(name, _)| {
                let (_, tail) = name.rsplit_once('_')?;
                tail.parse::<usize>().ok()
            })
            .max()
            .map_or(0, |n| n + 1);
        Staticizer { params: params.to_vec(), new_locals: Vec::new(), fresh: next }
    }

    pub(crate) fn fresh_local(&mut self, hint: &str, ty: ScalarType) -> String {
        let name = format!("{hint}_{}", self.fresh);
        self.fresh += 1;
        self.new_locals.push((name.clone(), ty));
        name
    }

    fn bound_max(&self, label: &str, param: &str) -> Result<(i64, ScalarType), StaticizeError> {
        for p in &self.params {
            if p.name == param {
                if let ParamKind::Scalar { ty, max } = p.kind {
                    if max == 0 || max > i64::MAX as u128 {
                        return Err(StaticizeError::NoDeclaredMaximum(
                            label.into(),
                            param.into(),
                        ));
                    }
                    return Ok((max as i64, ty));
                }
            }
        }
        Err(StaticizeError::NoDeclaredMaximum(label.into(), param.into()))
    }

    /// Rewrites one variable-bound loop in place. Returns locals that must be
    /// zero-initialized before the loop.
    fn staticize_loop(
        &mut self,
        l: &mut ForLoop,
        defined_before: &BTreeSet<String>,
        read_after: &BTreeSet<String>,
    ) -> Result<Vec<(String, ScalarType)>, StaticizeError> {
        let param = match &l.stop {
            Bound::Var { param } => param.clone(),
            Bound::Const(_) => unreachable!(),
        };
        let (max, ty) = self.bound_max(&l.label, &param)?;
        l.stop = Bound::Const(max);
        self.predicate_loop(l, Expr::var(&param), ty, defined_before, read_after)
    }

    /// Predicates every escaping write in `l`'s body on `counter < limit`,
    /// making iterations at or past `limit` effect-free. Returns locals that
    /// must be zero-initialized before the loop.
    pub(crate) fn predicate_loop(
        &mut self,
        l: &mut ForLoop,
        limit: Expr,
        ty: ScalarType,
        defined_before: &BTreeSet<String>,
        read_after: &BTreeSet<String>,
    ) -> Result<Vec<(String, ScalarType)>, StaticizeError> {
        if l.step <= 0 {
            return Err(StaticizeError::Unsupported(
                l.label.clone(),
                "descending loop".into(),
            ));
        }
        if l.body.iter().any(|n| !matches!(n, Node::Stmt(_))) {
            return Err(StaticizeError::Unsupported(
                l.label.clone(),
                "predication over a non-straight-line body".into(),
            ));
        }

        // p = 1 iff v < limit, computed as the borrow of v - limit.
        let p = self.fresh_local("live", ScalarType::U1);
        let junk = self.fresh_local("pad", ty);
        let guard = Statement::wide(
            Lvalue::local(&junk),
            Lvalue::local(&p),
            WideOp::SubBorrow,
            ty,
            vec![
                Expr::lit(0, ScalarType::U1),
                Expr::LoopVar { name: l.var.clone(), ty },
                limit,
            ],
        );

        // Per-iteration temps (written before every read, dead after the
        // loop) need no predication; everything else keeps its old value on
        // padded iterations.
        let needs_guard = |target: &Lvalue, reads_seen: &BTreeSet<String>| match target {
            Lvalue::Elem { .. } => true,
            Lvalue::Local { name } => read_after.contains(name) || reads_seen.contains(name),
        };

        let mut new_body = vec![Node::Stmt(guard)];
        let mut inits: Vec<(String, ScalarType)> = Vec::new();
        let mut reads_seen: BTreeSet<String> = BTreeSet::new();
        let env = {
            let mut tmp = StructuredProgram {
                name: "tmp".into(),
                params: self.params.clone(),
                locals: Vec::new(),
                local_arrays: Vec::new(),
                functions: Vec::new(),
                body: Vec::new(),
            };
            tmp.locals = self.new_locals.clone();
            tmp.type_env()
        };

        for node in std::mem::take(&mut l.body) {
            let Node::Stmt(stmt) = node else { unreachable!() };
            // A scalar read at or before its own write is live-in from the
            // previous iteration, so its write must be predicated too.
            for e in stmt.operand_exprs() {
                e.walk(&mut |sub| {
                    if let Expr::Var { name } = sub {
                        reads_seen.insert(name.clone());
                    }
                });
            }
            let guards: Vec<bool> =
                stmt.targets.iter().map(|t| needs_guard(t, &reads_seen)).collect();
            if guards.iter().all(|g| !g) {
                new_body.push(Node::Stmt(stmt));
                continue;
            }
            match stmt.rhs {
                Rhs::Plain(rhs) => {
                    let target = stmt.targets.into_iter().next().unwrap();
                    let old = match &target {
                        Lvalue::Elem { array, index } => {
                            Expr::read(array, (**index).clone())
                        }
                        Lvalue::Local { name } => {
                            if !defined_before.contains(name) {
                                let ty = local_type(&env, name, &rhs)?;
                                inits.push((name.clone(), ty));
                            }
                            Expr::var(name)
                        }
                    };
                    let ty = expr_width(&rhs, &env).or_else(|_| expr_width(&old, &env))?;
                    let sel = Expr::Cmov {
                        ty,
                        flag: Box::new(Expr::var(&p)),
                        if_zero: Box::new(old),
                        if_nonzero: Box::new(rhs),
                    };
                    new_body.push(Node::Stmt(Statement::assign(target, sel)));
                }
                Rhs::Wide { op, ty, args } => {
                    // Compute into fresh temps, then select per target.
                    let (ty0, ty1) = op.result_types(ty);
                    let t0 = self.fresh_local("w", ty0);
                    let t1 = self.fresh_local("w", ty1);
                    new_body.push(Node::Stmt(Statement::wide(
                        Lvalue::local(&t0),
                        Lvalue::local(&t1),
                        op,
                        ty,
                        args,
                    )));
                    for (k, target) in stmt.targets.into_iter().enumerate() {
                        let (tmp, tty) = if k == 0 { (&t0, ty0) } else { (&t1, ty1) };
                        if !guards[k] {
                            new_body.push(Node::Stmt(Statement::assign(
                                target,
                                Expr::var(tmp),
                            )));
                            continue;
                        }
                        let old = match &target {
                            Lvalue::Elem { array, index } => {
                                Expr::read(array, (**index).clone())
                            }
                            Lvalue::Local { name } => {
                                if !defined_before.contains(name) {
                                    inits.push((name.clone(), tty));
                                }
                                Expr::var(name)
                            }
                        };
                        let sel = Expr::Cmov {
                            ty: tty,
                            flag: Box::new(Expr::var(&p)),
                            if_zero: Box::new(old),
                            if_nonzero: Box::new(Expr::var(tmp)),
                        };
                        new_body.push(Node::Stmt(Statement::assign(target, sel)));
                    }
                }
            }
        }
        l.body = new_body;
        Ok(inits)
    }
}

fn local_type(env: &TypeEnv, name: &str, rhs: &Expr) -> Result<ScalarType, StaticizeError> {
    if let Some(t) = env.scalars.get(name) {
        return Ok(*t);
    }
    Ok(expr_width(rhs, env)?)
}

/// Replaces every runtime-variable loop bound with the bound parameter's
/// declared maximum and predicates the body so padded iterations write
/// nothing. The result has constant trip counts everywhere and no
/// data-dependent branches.
pub fn staticize_bounds(s: &StructuredProgram) -> Result<StructuredProgram, StaticizeError> {
    let mut out = s.clone();
    let has_var_bound = {
        fn scan(nodes: &[Node]) -> bool {
            nodes.iter().any(|n| match n {
                Node::For(f) => matches!(f.stop, Bound::Var { .. }) || scan(&f.body),
                _ => false,
            })
        }
        scan(&out.body)
    };
    if !has_var_bound {
        return Ok(out);
    }

    let mut st = Staticizer::new(&out.params, &out.locals);

    // Rewrite top-level variable-bound loops; recurse through constant loops.
    fn rewrite(
        nodes: &mut Vec<Node>,
        st: &mut Staticizer,
        defined_before: &mut BTreeSet<String>,
        read_later: &[BTreeSet<String>],
        level_offset: usize,
    ) -> Result<(), StaticizeError> {
        let mut k = 0;
        while k < nodes.len() {
            match &mut nodes[k] {
                Node::Stmt(s) => {
                    for t in &s.targets {
                        if let Lvalue::Local { name } = t {
                            defined_before.insert(name.clone());
                        }
                    }
                }
                Node::For(l) if matches!(l.stop, Bound::Var { .. }) => {
                    let read_after = &read_later[level_offset + k];
                    let inits = st.staticize_loop(l, defined_before, read_after)?;
                    let mut insert_at = k;
                    let mut seen = BTreeSet::new();
                    for (name, ty) in inits {
                        if defined_before.contains(&name) || !seen.insert(name.clone()) {
                            continue;
                        }
                        nodes.insert(
                            insert_at,
                            Node::Stmt(Statement::assign(
                                Lvalue::local(&name),
                                Expr::lit(0, ty),
                            )),
                        );
                        defined_before.insert(name);
                        insert_at += 1;
                        k += 1;
                    }
                    let mut assigned = BTreeSet::new();
                    if let Node::For(l) = &nodes[k] {
                        assigned_scalars(&l.body, &mut assigned);
                    }
                    defined_before.extend(assigned);
                }
                Node::For(l) => {
                    // Constant bound: a nested variable bound inside is out of
                    // scope for this pass.
                    fn scan(nodes: &[Node]) -> Option<String> {
                        for n in nodes {
                            if let Node::For(f) = n {
                                if matches!(f.stop, Bound::Var { .. }) {
                                    return Some(f.label.clone());
                                }
                                if let Some(lbl) = scan(&f.body) {
                                    return Some(lbl);
                                }
                            }
                        }
                        None
                    }
                    if let Some(lbl) = scan(&l.body) {
                        return Err(StaticizeError::Unsupported(
                            lbl,
                            "runtime bound nested under another loop".into(),
                        ));
                    }
                    let mut assigned = BTreeSet::new();
                    assigned_scalars(&l.body, &mut assigned);
                    defined_before.extend(assigned);
                }
                Node::Call { .. } => {}
            }
            k += 1;
        }
        Ok(())
    }

    // read_later[k] = scalars read by nodes after position k (top level only;
    // variable bounds are only handled there).
    let mut read_later: Vec<BTreeSet<String>> = vec![BTreeSet::new(); out.body.len()];
    let mut acc = BTreeSet::new();
    for k in (0..out.body.len()).rev() {
        read_later[k] = acc.clone();
        read_scalars(std::slice::from_ref(&out.body[k]), &mut acc);
    }

    let mut defined = BTreeSet::new();
    let mut body = std::mem::take(&mut out.body);
    rewrite(&mut body, &mut st, &mut defined, &read_later, 0)?;
    out.body = body;
    out.locals.extend(st.new_locals);
    validate_structured(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{check_equiv, EquivConfig, EquivVerdict};

    fn loop1(label: &str, var: &str, start: i64, stop: i64, step: i64, body: Vec<Node>) -> ForLoop {
        ForLoop { label: label.into(), var: var.into(), start, stop: Bound::Const(stop), step, body }
    }

    fn prog(params: Vec<Param>, locals: Vec<(String, ScalarType)>, body: Vec<Node>) -> StructuredProgram {
        StructuredProgram {
            name: "k".into(),
            params,
            locals,
            local_arrays: Vec::new(),
            functions: Vec::new(),
            body,
        }
    }

    fn v(name: &str) -> Expr {
        Expr::LoopVar { name: name.into(), ty: ScalarType::U64 }
    }

    #[test]
    fn disjoint_writes_carry_nothing() {
        let l = loop1(
            "L0",
            "v",
            0,
            8,
            1,
            vec![Node::Stmt(Statement::assign(
                Lvalue::elem("t", v("v")),
                Expr::bin(BinOp::Mul, Expr::read("a", v("v")), Expr::var("c")),
            ))],
        );
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::scalar("c", ScalarType::U64, u128::MAX >> 64),
                Param::array("t", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(l)],
        );
        let info = analyze_loops(&p);
        let s = info.get("L0").unwrap();
        assert!(!s.carried);
        assert_eq!(s.min_distance, None);
        assert_eq!(s.strides["t"], Some(1));
        assert_eq!(s.strides["a"], Some(1));
        assert!(s.perfect_nest);
    }

    #[test]
    fn recurrence_is_distance_one() {
        let l = loop1(
            "L0",
            "v",
            1,
            8,
            1,
            vec![Node::Stmt(Statement::assign(
                Lvalue::elem("t", v("v")),
                Expr::bin(
                    BinOp::Add,
                    Expr::read("t", Expr::bin(BinOp::Sub, v("v"), Expr::index_lit(1))),
                    Expr::read("a", v("v")),
                ),
            ))],
        );
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("t", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(l)],
        );
        let s = analyze_loops(&p);
        let s = s.get("L0").unwrap();
        assert!(s.carried);
        assert_eq!(s.min_distance, Some(1));
        assert_eq!(s.carried_arrays.iter().collect::<Vec<_>>(), ["t"]);
        assert_eq!(s.carried_stmts.iter().copied().collect::<Vec<_>>(), [0]);
    }

    #[test]
    fn masked_index_is_conservative() {
        let l = loop1(
            "L0",
            "v",
            0,
            8,
            1,
            vec![Node::Stmt(Statement::assign(
                Lvalue::elem("t", Expr::bin(BinOp::And, v("v"), Expr::index_lit(5))),
                Expr::read("a", v("v")),
            ))],
        );
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("t", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(l)],
        );
        let s = analyze_loops(&p);
        let s = s.get("L0").unwrap();
        assert!(s.carried);
        assert_eq!(s.min_distance, Some(1));
        assert_eq!(s.strides["t"], None);
    }

    #[test]
    fn wider_stride_reports_distance() {
        // t[v] read at v, written at v+2: distance 2.
        let l = loop1(
            "L0",
            "v",
            0,
            6,
            1,
            vec![Node::Stmt(Statement::assign(
                Lvalue::elem("t", Expr::bin(BinOp::Add, v("v"), Expr::index_lit(2))),
                Expr::read("t", v("v")),
            ))],
        );
        let p = prog(
            vec![Param::array("t", Direction::Out, ScalarType::U64, 8)],
            vec![],
            vec![Node::For(l)],
        );
        let s = analyze_loops(&p);
        assert_eq!(s.get("L0").unwrap().min_distance, Some(2));
    }

    #[test]
    fn accumulator_scalar_carries() {
        // acc = acc + a[v]: read of acc feeds from the previous iteration.
        let l = loop1(
            "L0",
            "v",
            0,
            8,
            1,
            vec![Node::Stmt(Statement::assign(
                Lvalue::local("acc"),
                Expr::bin(BinOp::Add, Expr::var("acc"), Expr::read("a", v("v"))),
            ))],
        );
        let p = prog(
            vec![Param::array("a", Direction::In, ScalarType::U64, 8)],
            vec![("acc".into(), ScalarType::U64)],
            vec![
                Node::Stmt(Statement::assign(Lvalue::local("acc"), Expr::lit(0, ScalarType::U64))),
                Node::For(l),
            ],
        );
        let s = analyze_loops(&p);
        let s = s.get("L0").unwrap();
        assert!(s.carried);
        assert_eq!(s.min_distance, Some(1));
    }

    #[test]
    fn per_iteration_temp_does_not_carry() {
        // t written then read within the same iteration: renameable.
        let l = loop1(
            "L0",
            "v",
            0,
            8,
            1,
            vec![
                Node::Stmt(Statement::assign(
                    Lvalue::local("t"),
                    Expr::bin(BinOp::Mul, Expr::read("a", v("v")), Expr::read("b", v("v"))),
                )),
                Node::Stmt(Statement::assign(Lvalue::elem("o", v("v")), Expr::var("t"))),
            ],
        );
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("b", Direction::In, ScalarType::U64, 8),
                Param::array("o", Direction::Out, ScalarType::U64, 8),
            ],
            vec![("t".into(), ScalarType::U64)],
            vec![Node::For(l)],
        );
        let s = analyze_loops(&p);
        assert!(!s.get("L0").unwrap().carried);
    }

    #[test]
    fn nest_depths_and_perfection() {
        let inner = loop1(
            "L1",
            "w",
            0,
            4,
            1,
            vec![Node::Stmt(Statement::assign(
                Lvalue::elem("o", Expr::bin(BinOp::Add, Expr::bin(BinOp::Mul, v("v"), Expr::index_lit(4)), v("w"))),
                Expr::read("a", v("w")),
            ))],
        );
        let outer = loop1("L0", "v", 0, 2, 1, vec![Node::For(inner)]);
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 4),
                Param::array("o", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(outer)],
        );
        let info = analyze_loops(&p);
        assert_eq!(info.loops.len(), 2);
        assert_eq!(info.get("L0").unwrap().depth, 0);
        assert_eq!(info.get("L1").unwrap().depth, 1);
        assert!(info.get("L0").unwrap().perfect_nest);
        // Writes hit disjoint elements across the whole nest.
        assert!(!info.get("L1").unwrap().carried);
    }

    #[test]
    fn identical_loops_group_for_outlining() {
        let mk = |label: &str, a: &str, o: &str| {
            loop1(
                label,
                "v",
                0,
                8,
                1,
                vec![Node::Stmt(Statement::assign(
                    Lvalue::elem(o, v("v")),
                    Expr::bin(BinOp::Mul, Expr::read(a, v("v")), Expr::read(a, v("v"))),
                ))],
            )
        };
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("b", Direction::In, ScalarType::U64, 8),
                Param::array("o1", Direction::Out, ScalarType::U64, 8),
                Param::array("o2", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![
                Node::For(mk("L0", "a", "o1")),
                Node::For(mk("L1", "b", "o2")),
            ],
        );
        let info = analyze_loops(&p);
        assert_eq!(info.outline_groups, vec![vec!["L0".to_string(), "L1".to_string()]]);
    }

    #[test]
    fn constant_bounds_staticize_to_identity() {
        let l = loop1(
            "L0",
            "v",
            0,
            8,
            1,
            vec![Node::Stmt(Statement::assign(Lvalue::elem("o", v("v")), Expr::read("a", v("v"))))],
        );
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("o", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(l)],
        );
        assert_eq!(staticize_bounds(&p).unwrap(), p);
    }

    #[test]
    fn variable_bound_pads_and_stays_equivalent() {
        let l = ForLoop {
            label: "L0".into(),
            var: "v".into(),
            start: 0,
            stop: Bound::Var { param: "n".into() },
            step: 1,
            body: vec![Node::Stmt(Statement::assign(
                Lvalue::elem("o", v("v")),
                Expr::bin(BinOp::Add, Expr::read("a", v("v")), Expr::lit(1, ScalarType::U64)),
            ))],
        };
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::scalar("n", ScalarType::U64, 8),
                Param::array("o", Direction::Out, ScalarType::U64, 8),
            ],
            vec![],
            vec![Node::For(l)],
        );
        let fixed = staticize_bounds(&p).unwrap();
        let lp = match &fixed.body[0] {
            Node::For(l) => l,
            _ => panic!("loop survives"),
        };
        assert_eq!(lp.stop, Bound::Const(8));
        assert!(side_channel_scan(&fixed).is_empty());
        // Bit-exact across every n the signature can draw (n <= 8).
        let verdict = check_equiv(&p, &fixed, &EquivConfig::default()).unwrap();
        assert!(matches!(verdict, EquivVerdict::Equivalent { .. }), "{verdict:?}");
    }

    #[test]
    fn per_iteration_temps_stay_unguarded() {
        // `t` is written before any read in every iteration, so padded
        // iterations may clobber it freely; only the array store that
        // escapes the loop needs predication.
        let l = ForLoop {
            label: "L0".into(),
            var: "v".into(),
            start: 0,
            stop: Bound::Var { param: "n".into() },
            step: 1,
            body: vec![
                Node::Stmt(Statement::assign(
                    Lvalue::local("t"),
                    Expr::bin(BinOp::Mul, Expr::read("a", v("v")), Expr::var("c")),
                )),
                Node::Stmt(Statement::assign(Lvalue::elem_at("o", 0), Expr::var("t"))),
            ],
        };
        let p = prog(
            vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::scalar("n", ScalarType::U64, 8),
                Param::scalar("c", ScalarType::U64, u128::MAX >> 64),
                Param::array("o", Direction::Out, ScalarType::U64, 1),
            ],
            vec![("t".into(), ScalarType::U64)],
            vec![Node::For(l)],
        );
        let fixed = staticize_bounds(&p).unwrap();
        let Node::For(lp) = &fixed.body[0] else { panic!("expected the loop") };
        // guard, untouched temp, predicated store
        assert_eq!(lp.body.len(), 3);
        assert!(
            matches!(&lp.body[1], Node::Stmt(s) if matches!(&s.rhs, Rhs::Plain(Expr::Bin { .. })))
        );
        assert!(
            matches!(&lp.body[2], Node::Stmt(s) if matches!(&s.rhs, Rhs::Plain(Expr::Cmov { .. })))
        );
        assert!(side_channel_scan(&fixed).is_empty());
        let verdict = check_equiv(&p, &fixed, &EquivConfig::default()).unwrap();
        assert!(matches!(verdict, EquivVerdict::Equivalent { .. }), "{verdict:?}");
    }

    #[test]
    fn missing_maximum_is_an_error() {
        let l = ForLoop {
            label: "L0".into(),
            var: "v".into(),
            start: 0,
            stop: Bound::Var { param: "n".into() },
            step: 1,
            body: vec![],
        };
        let p = prog(
            vec![Param::array("a", Direction::In, ScalarType::U64, 8)],
            vec![],
            vec![Node::For(l)],
        );
        assert!(matches!(
            staticize_bounds(&p),
            Err(StaticizeError::NoDeclaredMaximum(_, _))
        ));
    }
}
