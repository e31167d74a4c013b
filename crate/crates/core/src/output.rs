//! Run artifacts: deterministic renderers for the files an exploration run
//! leaves behind, plus the atomic writer they all go through.
//!
//! Every renderer is a pure function of its inputs, so identical runs
//! produce byte-identical artifacts. Files are written via a sibling
//! temporary file and a rename, never in place; readers observe either the
//! old artifact or the new one, nothing in between.

use crate::explore::{DesignPoint, PragmaConfig, Transform};
use crate::ir::StructuredProgram;
use crate::multikernel::CombinedDesign;
use crate::qor::{pareto_front, resource_percent, DeviceProfile, NpiBounds, ScoredPoint, Weights};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io;
use std::path::Path;

/// SHA-256 of the program's canonical JSON encoding, as lowercase hex.
/// Structurally equal programs hash equally; any semantic field change
/// (names, bounds, widths, statement order) changes the digest.
pub fn program_digest(p: &StructuredProgram) -> String {
    let bytes = serde_json::to_vec(p).expect("program serialization is infallible");
    let mut h = Sha256::new();
    h.update(&bytes);
    let out = h.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        use std::fmt::Write;
        write!(hex, "{b:02x}").unwrap();
    }
    hex
}

/// Writes `bytes` to `path` atomically: the data lands in `<path>.tmp` in
/// the same directory first and is renamed over the target, so a crash
/// mid-write never leaves a truncated artifact at the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let Some(name) = path.file_name() else {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("not a writable file path: {}", path.display()),
        ));
    };
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

// ---- design_space.json ----------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct DesignRecord<'a> {
    id: u64,
    transforms: &'a [Transform],
    pragmas: &'a PragmaConfig,
    program_digest: String,
}

#[derive(Debug, Clone, Serialize)]
struct DesignSpaceFile<'a> {
    seed: u64,
    points: Vec<DesignRecord<'a>>,
}

/// The design-space inventory: one record per point with its transform
/// recipe, directive set, and program digest. Programs themselves are not
/// embedded; the digest pins each one down exactly.
pub fn render_design_space(seed: u64, points: &[DesignPoint]) -> String {
    let file = DesignSpaceFile {
        seed,
        points: points
            .iter()
            .map(|p| DesignRecord {
                id: p.id,
                transforms: &p.transforms,
                pragmas: &p.pragmas,
                program_digest: program_digest(&p.program),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("artifact serialization");
    text.push('\n');
    text
}

// ---- pareto.csv -------------------------------------------------------------

/// One scored design in report form. `npi` is computed against the whole
/// scored population of the run, not just the front.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredRow {
    pub design_id: u64,
    pub latency_cycles: u64,
    pub dsp: u64,
    pub lut: u64,
    pub ff: u64,
    pub bram: u64,
    pub r_percent: f64,
    pub npi: f64,
}

/// Flattens the scored points into report rows. Points that were never
/// estimated carry no cost and are skipped.
pub fn score_rows(points: &[DesignPoint], dev: &DeviceProfile, w: Weights) -> Vec<ScoredRow> {
    let scored: Vec<(u64, crate::qor::QoR)> =
        points.iter().filter_map(|p| p.qor.map(|q| (p.id, q))).collect();
    let bounds = NpiBounds::from_population(
        scored.iter().map(|(_, q)| (q.latency_cycles as f64, resource_percent(q, dev))),
    );
    scored
        .iter()
        .map(|(id, q)| {
            let r = resource_percent(q, dev);
            ScoredRow {
                design_id: *id,
                latency_cycles: q.latency_cycles,
                dsp: q.dsp_used,
                lut: q.lut_used,
                ff: q.ff_used,
                bram: q.bram_used,
                r_percent: r,
                npi: bounds.map_or(0.0, |b| b.score(q.latency_cycles as f64, r, w)),
            }
        })
        .collect()
}

/// The rows of `rows` that survive dominance filtering, in ascending-latency
/// order (the order the front is reported everywhere).
pub fn front_rows(rows: &[ScoredRow]) -> Vec<ScoredRow> {
    let pts: Vec<ScoredPoint> = rows
        .iter()
        .map(|r| ScoredPoint { id: r.design_id, latency_cycles: r.latency_cycles, r: r.r_percent })
        .collect();
    pareto_front(pts)
        .into_iter()
        .map(|p| *rows.iter().find(|r| r.design_id == p.id).expect("front id came from rows"))
        .collect()
}

/// The Pareto front as CSV: a seed comment, a header, then one line per
/// front point in ascending-latency order. Floats carry six decimals.
pub fn render_pareto_csv(seed: u64, rows: &[ScoredRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# seed {seed}\n"));
    out.push_str("design_id,latency_cycles,dsp,lut,ff,bram,r_percent,npi\n");
    for r in front_rows(rows) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6}\n",
            r.design_id, r.latency_cycles, r.dsp, r.lut, r.ff, r.bram, r.r_percent, r.npi
        ));
    }
    out
}

/// The scored point with the lowest normalized index; ties break toward
/// lower latency, then lower id. `None` when nothing was scored.
pub fn best_row(rows: &[ScoredRow]) -> Option<ScoredRow> {
    rows.iter()
        .copied()
        .min_by(|a, b| {
            a.npi
                .total_cmp(&b.npi)
                .then(a.latency_cycles.cmp(&b.latency_cycles))
                .then(a.design_id.cmp(&b.design_id))
        })
}

// ---- pareto.svg -------------------------------------------------------------

/// Fixed scatter-plot geometry: an 800 by 600 canvas with room for axis
/// labels on the left and bottom.
const SVG_W: f64 = 800.0;
const SVG_H: f64 = 600.0;
const M_LEFT: f64 = 86.0;
const M_RIGHT: f64 = 26.0;
const M_TOP: f64 = 26.0;
const M_BOTTOM: f64 = 64.0;

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    /// Linear map with 5% headroom on both ends; degenerate ranges get a
    /// unit of padding so a single point still lands mid-axis.
    fn fit(values: impl Iterator<Item = f64>, px_lo: f64, px_hi: f64) -> Scale {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let pad = if hi > lo { (hi - lo) * 0.05 } else { lo.abs().max(1.0) * 0.1 };
        Scale { lo: (lo - pad).max(0.0), hi: hi + pad, px_lo, px_hi }
    }

    fn px(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    /// Five evenly spaced tick values, endpoints included.
    fn ticks(&self) -> Vec<f64> {
        (0..5).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
    }
}

/// A static scatter of the scored design space on the latency/resource
/// plane. Dominated points are muted; the front is drawn as a connected
/// polyline with emphasized markers. Self-contained SVG, linear axes.
pub fn render_pareto_svg(seed: u64, rows: &[ScoredRow]) -> String {
    let front = front_rows(rows);
    let front_ids: std::collections::BTreeSet<u64> =
        front.iter().map(|r| r.design_id).collect();

    let xs = Scale::fit(rows.iter().map(|r| r.latency_cycles as f64), M_LEFT, SVG_W - M_RIGHT);
    // The y pixel axis runs downward, so the value axis is flipped.
    let ys = Scale::fit(rows.iter().map(|r| r.r_percent), SVG_H - M_BOTTOM, M_TOP);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" \
         viewBox=\"0 0 800 600\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    s.push_str(&format!("  <desc>design space, seed {seed}</desc>\n"));
    s.push_str("  <rect width=\"800\" height=\"600\" fill=\"#ffffff\"/>\n");

    // Axes and ticks.
    let x0 = M_LEFT;
    let x1 = SVG_W - M_RIGHT;
    let y0 = SVG_H - M_BOTTOM;
    let y1 = M_TOP;
    s.push_str(&format!(
        "  <line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y0:.2}\" stroke=\"#444\"/>\n"
    ));
    s.push_str(&format!(
        "  <line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x0:.2}\" y2=\"{y1:.2}\" stroke=\"#444\"/>\n"
    ));
    for t in xs.ticks() {
        let px = xs.px(t);
        s.push_str(&format!(
            "  <line x1=\"{px:.2}\" y1=\"{y0:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#444\"/>\n",
            y0 + 6.0
        ));
        s.push_str(&format!(
            "  <text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t:.0}</text>\n",
            y0 + 22.0
        ));
    }
    for t in ys.ticks() {
        let py = ys.px(t);
        s.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{x0:.2}\" y2=\"{py:.2}\" stroke=\"#444\"/>\n",
            x0 - 6.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{t:.1}</text>\n",
            x0 - 10.0,
            py + 4.0
        ));
    }
    s.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">latency (cycles)</text>\n",
        (x0 + x1) / 2.0,
        SVG_H - 18.0
    ));
    s.push_str(&format!(
        "  <text x=\"20\" y=\"{:.2}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 20 {:.2})\">resource (% of device)</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    ));

    if rows.is_empty() {
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"#888\">no scored \
             points</text>\n",
            (x0 + x1) / 2.0,
            (y0 + y1) / 2.0
        ));
    }

    // Front polyline beneath its markers, dominated points beneath both.
    for r in rows.iter().filter(|r| !front_ids.contains(&r.design_id)) {
        s.push_str(&format!(
            "  <circle class=\"dominated\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#9aa7b1\" \
             fill-opacity=\"0.75\"><title>id {} ({} cy, {:.2}%)</title></circle>\n",
            xs.px(r.latency_cycles as f64),
            ys.px(r.r_percent),
            r.design_id,
            r.latency_cycles,
            r.r_percent
        ));
    }
    if front.len() > 1 {
        let pts: Vec<String> = front
            .iter()
            .map(|r| format!("{:.2},{:.2}", xs.px(r.latency_cycles as f64), ys.px(r.r_percent)))
            .collect();
        s.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#c8502d\" stroke-width=\"1.5\" \
             stroke-dasharray=\"4 3\"/>\n",
            pts.join(" ")
        ));
    }
    for r in &front {
        s.push_str(&format!(
            "  <circle class=\"front\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"5.5\" fill=\"#c8502d\" \
             stroke=\"#7c2d12\"><title>id {} ({} cy, {:.2}%)</title></circle>\n",
            xs.px(r.latency_cycles as f64),
            ys.px(r.r_percent),
            r.design_id,
            r.latency_cycles,
            r.r_percent
        ));
    }
    s.push_str("</svg>\n");
    s
}

// ---- combined.json ----------------------------------------------------------

/// How the budgeted selection of a combination run ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BudgetOutcome {
    /// A feasible design won under the configured objective.
    Selected { mode: String, dsp_budget: u64, design: CombinedDesign },
    /// No combination fits; `needed` is the smallest combined DSP count.
    Infeasible { dsp_budget: u64, needed: u64, witness: CombinedDesign },
}

/// Everything a combination run reports: the nondominated combined designs
/// plus the budget verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombineReport {
    pub seed: u64,
    pub device: String,
    pub designs: Vec<CombinedDesign>,
    pub outcome: BudgetOutcome,
}

pub fn render_combined(report: &CombineReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("artifact serialization");
    text.push('\n');
    text
}
