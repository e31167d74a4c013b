//! Command-line surface of the toolchain.
//!
//! Five subcommands cover the pipeline end to end: `roll` recovers loops
//! from a flat kernel, `explore` builds and scores the certified design
//! space of a structured kernel, `check` compares two kernels bit for bit,
//! `combine` merges per-kernel fronts and selects under a DSP budget, and
//! `report` summarizes one kernel's shape and estimated cost.
//!
//! Exit codes are part of the contract: 0 success, 1 semantic divergence
//! (programs disagree on some input — including the internal certification
//! of a generated variant), 2 usage, parse, or signature problems, 3 no
//! combined design fits the resource budget.

use crate::dataflow::{assign_arrays, build_ddg};
use crate::emit::emit_c;
use crate::explore::pragmas::min_ii_by_loop;
use crate::explore::{
    analyze_loops, refine_design_space, score_design_space, staticize_bounds,
    synthesize_design_space, ExploreConfig, PragmaConfig, SpaceError,
};
use crate::ir::{Bound, Direction, Param, ParamKind};
use crate::multikernel::{
    combine_fronts, select_under_budget, FrontPoint, KernelFront, SelectError, SelectionMode,
};
use crate::oracle::{check_equiv, EquivConfig, EquivError};
use crate::output::{
    best_row, render_combined, render_design_space, render_pareto_csv, render_pareto_svg,
    score_rows, write_atomic, BudgetOutcome, CombineReport,
};
use crate::parser::{parse_str, parse_straight_line};
use crate::pipeline::{roll, RollConfig};
use crate::qor::{estimate, resource_percent, DeviceProfile, EstimatorParams, QoR, Weights};
use crate::saturate::{saturate, select_targets, RTerm, SaturationConfig};
use crate::template::abstract_program;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_EQUIVALENT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

/// `println!` that shrugs off a closed stdout (e.g. piping into `head`)
/// instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// How many combined designs `combine` will enumerate before per-front
/// pruning kicks in upstream.
const COMBINE_LIMIT: usize = 1 << 16;

#[derive(Parser)]
#[command(
    name = "reroll",
    version,
    about = "Re-rolls flat kernels into loops and explores hardware design variants"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Re-roll a flat kernel into loops and write rolled.slc
    Roll(RollArgs),
    /// Enumerate, certify, and score design variants of a kernel
    Explore(ExploreArgs),
    /// Check two kernels for bit-exact equivalence
    Check(CheckArgs),
    /// Combine per-kernel Pareto fronts and select under a DSP budget
    Combine(CombineArgs),
    /// Summarize a kernel: signature, loop structure, estimated cost
    Report(ReportArgs),
}

#[derive(Args)]
struct RollArgs {
    /// Flat straight-line kernel (.slc)
    input: PathBuf,
    /// Seed for the equivalence vector battery; recorded in artifacts
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Random equivalence vectors on top of the corner battery
    #[arg(long, default_value_t = 1000, value_name = "N")]
    vectors: usize,
    /// Shortest statement run worth rolling into a loop
    #[arg(long, default_value_t = 2, value_name = "N")]
    min_seq_len: usize,
    /// Output directory
    #[arg(short, long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    /// Also write the data-dependence graph as ddg.dot
    #[arg(long)]
    dump_ddg: bool,
    /// Also write the template and instance tables as templates.json
    #[arg(long)]
    dump_templates: bool,
    /// Also write per-sequence saturation statistics as egraph.json
    #[arg(long)]
    dump_egraph: bool,
}

#[derive(Args)]
struct ExploreArgs {
    /// Kernel to explore (.slc, typically the output of roll)
    input: PathBuf,
    /// Seed for the equivalence vector battery; recorded in artifacts
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Random equivalence vectors per variant
    #[arg(long, default_value_t = 1000, value_name = "N")]
    vectors: usize,
    /// Device profile: built-in name or a TOML/JSON file
    #[arg(long, default_value = "zu9eg")]
    device: String,
    /// Objective weights "w1,w2" for latency and resource; must sum to 1
    #[arg(long, default_value = "0.5,0.5", value_parser = parse_weights)]
    weights: Weights,
    /// Largest unroll factor offered per loop
    #[arg(long, default_value_t = 16, value_name = "N")]
    max_unroll: u32,
    /// Front-refinement rounds after the initial enumeration
    #[arg(long, default_value_t = 0, value_name = "N")]
    refine: u32,
    /// Output directory
    #[arg(short, long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Reference kernel (.slc)
    reference: PathBuf,
    /// Candidate kernel (.slc)
    candidate: PathBuf,
    /// Seed for the random vector battery
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Random vectors on top of the corner battery
    #[arg(long, default_value_t = 1000, value_name = "N")]
    vectors: usize,
}

#[derive(Args)]
struct CombineArgs {
    /// Per-kernel front files: pareto.csv or KernelFront JSON
    #[arg(required = true)]
    fronts: Vec<PathBuf>,
    /// Recorded in combined.json for provenance
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Device profile: built-in name or a TOML/JSON file
    #[arg(long, default_value = "zu9eg")]
    device: String,
    /// Objective weights "w1,w2"; must sum to 1
    #[arg(long, default_value = "0.5,0.5", value_parser = parse_weights)]
    weights: Weights,
    /// DSP budget; defaults to the device's full capacity
    #[arg(long, value_name = "N")]
    dsp_budget: Option<u64>,
    /// Selection objective among feasible designs
    #[arg(long, default_value = "npi", value_parser = parse_mode)]
    mode: SelectionMode,
    /// Output directory
    #[arg(short, long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Kernel to summarize (.slc)
    input: PathBuf,
    /// Device profile used for utilization percentages
    #[arg(long, default_value = "zu9eg")]
    device: String,
}

fn parse_weights(s: &str) -> Result<Weights, String> {
    let (a, b) = s.split_once(',').ok_or("expected \"w1,w2\"")?;
    let w1: f64 = a.trim().parse().map_err(|e| format!("w1: {e}"))?;
    let w2: f64 = b.trim().parse().map_err(|e| format!("w2: {e}"))?;
    Weights::new(w1, w2).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<SelectionMode, String> {
    s.parse()
}

/// A failed subcommand: the process exit code plus a message for stderr.
#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, msg: msg.into() }
}

/// Parses and dispatches `args` (including the binary name). Returns the
/// process exit code; all narrative output goes to stdout, errors to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // --help/--version land here too; those print to stdout and
            // succeed, everything else is a usage error.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Roll(a) => cmd_roll(a),
        Cmd::Explore(a) => cmd_explore(a),
        Cmd::Check(a) => cmd_check(a),
        Cmd::Combine(a) => cmd_combine(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_device(spec: &str) -> Result<DeviceProfile, Failure> {
    if let Some(dev) = DeviceProfile::named(spec) {
        return Ok(dev);
    }
    let path = Path::new(spec);
    if path.exists() {
        DeviceProfile::from_file(path).map_err(|e| usage(e.to_string()))
    } else {
        Err(usage(format!("unknown device `{spec}` (built-in: zu9eg; or pass a TOML/JSON file)")))
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn write_artifact(path: &Path, text: &str) -> Result<(), Failure> {
    write_atomic(path, text.as_bytes())
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    say!("wrote {}", path.display());
    Ok(())
}

// ---- roll -------------------------------------------------------------------

fn cmd_roll(a: RollArgs) -> Result<(), Failure> {
    let src = read_input(&a.input)?;
    let flat = parse_straight_line(&src)
        .map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    let cfg = RollConfig {
        saturation: SaturationConfig { min_sequence_ops: a.min_seq_len, ..Default::default() },
        equiv: EquivConfig { n_vectors: a.vectors, seed: a.seed },
    };
    let (rolled, report) = roll(&flat, &cfg).map_err(|e| usage(e.to_string()))?;

    if !report.verdict.is_equivalent() {
        // A divergent result is a bug in the rewriter; nothing is written.
        let verdict = serde_json::to_string_pretty(&report.verdict).expect("verdict json");
        eprintln!("{verdict}");
        return Err(Failure {
            code: EXIT_NOT_EQUIVALENT,
            msg: "re-rolled kernel diverges from its input; nothing written".into(),
        });
    }

    ensure_dir(&a.out)?;
    say!("statements: {} -> {}", report.statements_before, report.statements_after);
    say!("loops: {}", report.loops);
    say!("verdict: equivalent");
    if report.truncated {
        say!("note: saturation hit its growth cap; the result may be conservative");
    }
    let text = format!("// seed {}\n{}", a.seed, emit_c(&rolled, &[]));
    write_artifact(&a.out.join("rolled.slc"), &text)?;

    if a.dump_ddg || a.dump_templates || a.dump_egraph {
        let ddg = build_ddg(&flat);
        if a.dump_ddg {
            write_artifact(&a.out.join("ddg.dot"), &ddg.to_dot(&flat))?;
        }
        if a.dump_templates || a.dump_egraph {
            let (packed, _) = assign_arrays(&flat, &ddg);
            let abs = abstract_program(&packed);
            if a.dump_templates {
                let mut text =
                    serde_json::to_string_pretty(&abs).expect("template table json");
                text.push('\n');
                write_artifact(&a.out.join("templates.json"), &text)?;
            }
            if a.dump_egraph {
                #[derive(serde::Serialize)]
                struct SaturationStats {
                    sequence: usize,
                    template_id: usize,
                    ops: usize,
                    classes: usize,
                    nodes: usize,
                    truncated: bool,
                    extracted: RTerm,
                }
                let mut stats = Vec::new();
                let seqs = select_targets(abs.sequences.clone(), &cfg.saturation);
                for (i, seq) in seqs.iter().enumerate() {
                    if seq.excluded || seq.instances.len() < 2 {
                        continue;
                    }
                    let ops: Vec<RTerm> = seq
                        .instances
                        .iter()
                        .map(|inst| RTerm::op(seq.template_id, &inst.consts))
                        .collect();
                    let n_ops = ops.len();
                    let g = saturate(&RTerm::Seq(ops), &cfg.saturation);
                    stats.push(SaturationStats {
                        sequence: i,
                        template_id: seq.template_id,
                        ops: n_ops,
                        classes: g.n_classes(),
                        nodes: g.n_nodes,
                        truncated: g.truncated,
                        extracted: crate::saturate::extract_best(&g),
                    });
                }
                let mut text = serde_json::to_string_pretty(&stats).expect("egraph stats json");
                text.push('\n');
                write_artifact(&a.out.join("egraph.json"), &text)?;
            }
        }
    }
    Ok(())
}

// ---- explore ----------------------------------------------------------------

fn space_failure(e: SpaceError) -> Failure {
    match e {
        SpaceError::Diverged { .. } => Failure { code: EXIT_NOT_EQUIVALENT, msg: e.to_string() },
        other => usage(other.to_string()),
    }
}

fn cmd_explore(a: ExploreArgs) -> Result<(), Failure> {
    let src = read_input(&a.input)?;
    let p = parse_str(&src).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    // Data-dependent bounds are compiled away before anything else: every
    // program this run emits must execute a fixed iteration count.
    let p = staticize_bounds(&p).map_err(|e| usage(e.to_string()))?;

    let dev = load_device(&a.device)?;
    let params = EstimatorParams::default();
    let cfg = ExploreConfig { max_unroll: a.max_unroll, ..Default::default() };
    let equiv = EquivConfig { n_vectors: a.vectors, seed: a.seed };

    let mut points = synthesize_design_space(&p, &cfg, &equiv, &params).map_err(space_failure)?;
    score_design_space(&mut points, &params).map_err(|e| usage(e.to_string()))?;
    refine_design_space(&mut points, a.refine, &cfg, &params, &dev).map_err(space_failure)?;

    let rows = score_rows(&points, &dev, a.weights);
    let csv = render_pareto_csv(a.seed, &rows);
    let front_size = csv.lines().count() - 2;
    say!("design points: {} ({} on the front)", points.len(), front_size);

    ensure_dir(&a.out)?;
    write_artifact(&a.out.join("design_space.json"), &render_design_space(a.seed, &points))?;
    write_artifact(&a.out.join("pareto.csv"), &csv)?;
    write_artifact(&a.out.join("pareto.svg"), &render_pareto_svg(a.seed, &rows))?;

    if let Some(best) = best_row(&rows) {
        let point = points
            .iter()
            .find(|p| p.id == best.design_id)
            .expect("best row id comes from points");
        say!(
            "best: id {} ({} cycles, {} DSP, npi {:.4})",
            best.design_id, best.latency_cycles, best.dsp, best.npi
        );
        let text = format!(
            "// seed {}\n{}",
            a.seed,
            emit_c(&point.program, &point.pragmas.to_pragma_lines())
        );
        write_artifact(&a.out.join("best.c"), &text)?;
    }
    Ok(())
}

// ---- check ------------------------------------------------------------------

fn cmd_check(a: CheckArgs) -> Result<(), Failure> {
    let reference = parse_str(&read_input(&a.reference)?)
        .map_err(|e| usage(format!("{}: {e}", a.reference.display())))?;
    let candidate = parse_str(&read_input(&a.candidate)?)
        .map_err(|e| usage(format!("{}: {e}", a.candidate.display())))?;
    let cfg = EquivConfig { n_vectors: a.vectors, seed: a.seed };
    match check_equiv(&reference, &candidate, &cfg) {
        Ok(verdict) => {
            say!("{}", serde_json::to_string_pretty(&verdict).expect("verdict json"));
            if verdict.is_equivalent() {
                Ok(())
            } else {
                Err(Failure { code: EXIT_NOT_EQUIVALENT, msg: "programs differ".into() })
            }
        }
        Err(EquivError::SignatureMismatch(detail)) => {
            let verdict =
                serde_json::json!({ "verdict": "signature_mismatch", "detail": detail });
            say!("{}", serde_json::to_string_pretty(&verdict).expect("verdict json"));
            Err(usage(format!("signatures differ: {detail}")))
        }
        Err(e) => Err(usage(e.to_string())),
    }
}

// ---- combine ----------------------------------------------------------------

fn mode_name(mode: SelectionMode) -> &'static str {
    match mode {
        SelectionMode::Latency => "latency",
        SelectionMode::Npi => "npi",
    }
}

/// Reads one per-kernel front. JSON files carry a full `KernelFront`; CSV
/// files use the pareto.csv column layout, and the kernel takes the file's
/// stem as its name.
fn load_front(path: &Path) -> Result<KernelFront, Failure> {
    let text = read_input(path)?;
    let bad = |e: String| usage(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        return serde_json::from_str(&text).map_err(|e| bad(e.to_string()));
    }
    let kernel = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "kernel".into());
    let mut points = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("design_id") {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 6 {
            return Err(bad(format!("front row needs at least 6 columns: `{line}`")));
        }
        let field = |i: usize| -> Result<u64, Failure> {
            cells[i].trim().parse().map_err(|e| bad(format!("column {}: {e}", i + 1)))
        };
        points.push(FrontPoint {
            design_id: field(0)?,
            qor: QoR {
                latency_cycles: field(1)?,
                dsp_used: field(2)?,
                lut_used: field(3)?,
                ff_used: field(4)?,
                bram_used: field(5)?,
            },
        });
    }
    Ok(KernelFront { kernel, points })
}

fn cmd_combine(a: CombineArgs) -> Result<(), Failure> {
    let dev = load_device(&a.device)?;
    let fronts: Vec<KernelFront> =
        a.fronts.iter().map(|p| load_front(p)).collect::<Result<_, _>>()?;
    let designs =
        combine_fronts(&fronts, COMBINE_LIMIT, &dev, a.weights).map_err(|e| usage(e.to_string()))?;
    say!("combined designs on the front: {}", designs.len());

    let budget = a.dsp_budget.unwrap_or(dev.dsp_total);
    let (outcome, failure) = match select_under_budget(&designs, budget, a.mode, &dev, a.weights) {
        Ok(design) => {
            say!(
                "selected ({} mode, {budget} DSP budget): {} cycles, {} DSP",
                mode_name(a.mode),
                design.total.latency_cycles,
                design.total.dsp_used
            );
            for chosen in &design.selection {
                say!(
                    "  {}: design {} ({} cycles, {} DSP)",
                    chosen.kernel, chosen.design_id, chosen.qor.latency_cycles, chosen.qor.dsp_used
                );
            }
            let outcome = BudgetOutcome::Selected {
                mode: mode_name(a.mode).into(),
                dsp_budget: budget,
                design,
            };
            (outcome, None)
        }
        Err(SelectError::Infeasible { budget, needed, witness }) => {
            let outcome = BudgetOutcome::Infeasible { dsp_budget: budget, needed, witness };
            let failure = Failure {
                code: EXIT_INFEASIBLE,
                msg: format!("no combined design fits {budget} DSPs; the cheapest needs {needed}"),
            };
            (outcome, Some(failure))
        }
        Err(e @ SelectError::Empty) => return Err(usage(e.to_string())),
    };

    ensure_dir(&a.out)?;
    let report = CombineReport { seed: a.seed, device: dev.name.clone(), designs, outcome };
    write_artifact(&a.out.join("combined.json"), &render_combined(&report))?;
    match failure {
        None => Ok(()),
        Some(f) => Err(f),
    }
}

// ---- report -----------------------------------------------------------------

fn param_line(p: &Param) -> String {
    let dir = match p.dir {
        Direction::In => "in ",
        Direction::Out => "out",
    };
    match p.kind {
        ParamKind::Array { elem, len } => format!("  {dir} {elem} {}[{len}]", p.name),
        ParamKind::Scalar { ty, max } => format!("  {dir} {ty} {} <= {max}", p.name),
    }
}

fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    let src = read_input(&a.input)?;
    let p = parse_str(&src).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    let dev = load_device(&a.device)?;
    let params = EstimatorParams::default();

    say!("kernel: {}", p.name);
    for param in &p.params {
        say!("{}", param_line(param));
    }

    let info = analyze_loops(&p);
    // Cost estimation needs fixed trip counts; the summary below still
    // describes the program as written.
    let fixed = staticize_bounds(&p).map_err(|e| usage(e.to_string()))?;
    let min_ii = min_ii_by_loop(&fixed, &params).map_err(|e| usage(e.to_string()))?;

    if info.loops.is_empty() {
        say!("loops: none");
    } else {
        say!("loops:");
        for s in &info.loops {
            let bound = p
                .loops()
                .iter()
                .find(|(l, _)| l.label == s.label)
                .map(|(l, _)| matches!(l.stop, Bound::Var { .. }))
                .unwrap_or(false);
            let trip = if bound {
                format!("trip <= {}", s.trip_count)
            } else {
                format!("trip {}", s.trip_count)
            };
            let dep = if s.carried {
                match s.min_distance {
                    Some(d) => format!("carried (min distance {d})"),
                    None => "carried".into(),
                }
            } else {
                "independent".into()
            };
            let ii = min_ii.get(&s.label).copied().unwrap_or(1);
            say!("  {}: {trip}, depth {}, {dep}, min II {ii}", s.label, s.depth);
        }
    }

    let q = estimate(&fixed, &PragmaConfig::default(), &params)
        .map_err(|e| usage(e.to_string()))?;
    say!(
        "estimate (no directives): {} cycles, {} DSP, {} LUT, {} FF, {} BRAM",
        q.latency_cycles, q.dsp_used, q.lut_used, q.ff_used, q.bram_used
    );
    say!("device {}: {:.2}% of capacity", dev.name, resource_percent(&q, &dev));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_strings_parse_or_explain() {
        assert_eq!(parse_weights("0.5,0.5").unwrap(), Weights::new(0.5, 0.5).unwrap());
        assert_eq!(parse_weights(" 0.2 , 0.8 ").unwrap(), Weights::new(0.2, 0.8).unwrap());
        assert!(parse_weights("0.5").is_err());
        assert!(parse_weights("0.9,0.9").is_err());
        assert!(parse_weights("a,b").is_err());
    }

    #[test]
    fn front_csv_rows_become_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p256.csv");
        std::fs::write(
            &path,
            "# seed 42\ndesign_id,latency_cycles,dsp,lut,ff,bram,r_percent,npi\n\
             3,67,428,100,0,2,17.245000,0.000000\n",
        )
        .unwrap();
        let front = load_front(&path).unwrap();
        assert_eq!(front.kernel, "p256");
        assert_eq!(front.points.len(), 1);
        assert_eq!(front.points[0].design_id, 3);
        assert_eq!(front.points[0].qor.latency_cycles, 67);
        assert_eq!(front.points[0].qor.dsp_used, 428);
        assert_eq!(front.points[0].qor.bram_used, 2);
    }

    #[test]
    fn json_fronts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        let front = KernelFront {
            kernel: "k".into(),
            points: vec![FrontPoint {
                design_id: 7,
                qor: QoR { latency_cycles: 12, dsp_used: 96, ..Default::default() },
            }],
        };
        std::fs::write(&path, serde_json::to_string(&front).unwrap()).unwrap();
        let loaded = load_front(&path).unwrap();
        assert_eq!(loaded, front);
    }

    #[test]
    fn unknown_devices_are_usage_errors() {
        assert!(load_device("zu9eg").is_ok());
        let err = load_device("notachip").unwrap_err();
        assert_eq!(err.code, EXIT_USAGE);
        assert!(err.msg.contains("notachip"));
    }
}
