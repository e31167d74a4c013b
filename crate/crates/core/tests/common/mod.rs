//! Helpers shared by the integration suites: paths to the on-disk kernel
//! fixtures, a deterministic corpus of single-loop kernels for unroll/re-roll
//! round trips, and a seeded straight-line generator for property tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The five bignum-flavoured kernels under `tests/fixtures/`.
pub const FIAT_FIXTURES: &[&str] = &[
    "limb_add.slc",
    "limb_sub_cond.slc",
    "dot_acc.slc",
    "scale_limbs.slc",
    "mac8.slc",
];

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn load_fixture(name: &str) -> String {
    let path = fixture_path(name);
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read fixture {}: {e}", path.display()))
}

/// A structured kernel whose single loop is expected to survive an
/// unroll/re-roll round trip with its trip count intact.
pub struct CorpusEntry {
    pub name: String,
    pub source: String,
    pub trip: i64,
}

/// Loop-body shapes the corpus cycles through. Every body is a single
/// statement: runs of one statement shape stay contiguous after unrolling,
/// which is what re-rolling groups on.
const SHAPE_NAMES: &[&str] = &["sum", "adjmul", "shiftmix", "maskaff", "widemul", "pinhole"];

fn corpus_entry(trip: i64, step: i64, shape: usize) -> CorpusEntry {
    assert!(trip >= 2 && step != 0);
    let stride = step.abs();
    // Ascending loops count 0, s, ..., (t-1)s; descending ones run the same
    // values in reverse. Either way the largest index touched is (t-1)s,
    // plus one for the shape that peeks at `v + 1`.
    let max_v = (trip - 1) * stride;
    let extra = if shape == 1 { 1 } else { 0 };
    let len = max_v + extra + 2;
    let header = if step > 0 {
        format!("L0: for (i64 v = 0; v < {}; v += {}) {{", trip * step, step)
    } else {
        format!("L0: for (i64 v = {max_v}; v > -{stride}; v += {step}) {{")
    };
    let (params, body) = match shape {
        0 => (
            format!("const u64 a[{len}], const u64 b[{len}], u64 o[{len}]"),
            "o[v] = a[v] + b[v];".to_string(),
        ),
        1 => (
            format!("const u64 a[{len}], u64 o[{len}]"),
            "o[v] = a[v + 1] * a[v];".to_string(),
        ),
        2 => (
            format!("const u64 a[{len}], const u64 b[{len}], u64 o[{len}]"),
            "o[v] = (a[v] << 2) + b[v];".to_string(),
        ),
        3 => (
            format!("const u64 a[{len}], u64 o[{len}]"),
            "o[v] = a[v] & (v * 8 + 7);".to_string(),
        ),
        4 => (
            format!("const u64 a[{len}], const u64 b[{len}], u64 hi[{len}], u64 lo[{len}]"),
            "(hi[v], lo[v]) = mulwide_u64(a[v], b[v]);".to_string(),
        ),
        5 => (
            format!("const u64 a[{len}], u64 o[{len}]"),
            "o[v] = a[v] + a[0];".to_string(),
        ),
        _ => unreachable!("shape out of range"),
    };
    let dir = if step > 0 { "p" } else { "m" };
    let name = format!("t{trip}{dir}{stride}_{}", SHAPE_NAMES[shape]);
    let source = format!("void {name}({params}) {{\n  {header}\n    {body}\n  }}\n}}\n");
    CorpusEntry { name, source, trip }
}

/// Deterministic round-trip corpus: every trip count in 2..=16 crossed with
/// three of the five step sizes, body shapes cycling so each shape appears
/// at several trips. Guarantees at least one trip-2 kernel whose only
/// iteration-varying hole is the index, and multi-hole bodies at trips >= 3.
pub fn round_trip_corpus() -> Vec<CorpusEntry> {
    const TRIPS: [i64; 9] = [2, 3, 4, 5, 6, 8, 10, 12, 16];
    const STEPS: [i64; 5] = [-2, -1, 1, 2, 3];
    let mut out = Vec::new();
    for (ti, &trip) in TRIPS.iter().enumerate() {
        for j in 0..3 {
            let step = STEPS[(ti + j) % STEPS.len()];
            let shape = if ti == 0 && j == 0 { 5 } else { (3 * ti + j) % 6 };
            out.push(corpus_entry(trip, step, shape));
        }
    }
    out
}

/// Seeded straight-line kernel: a handful of statement runs whose indices
/// advance affinely, mixed with one-off noise statements. Runs use strides
/// of 1 or 2 and stay inside the declared array bounds; output cells may be
/// written more than once (last write wins).
pub fn random_flat_source(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: i64 = rng.gen_range(6..=12);
    let mut body = String::new();
    for _ in 0..rng.gen_range(1..=4usize) {
        let shape = rng.gen_range(0..6usize);
        let extra = if shape == 4 { 1 } else { 0 };
        let stride: i64 = if rng.gen_bool(0.5) { 1 } else { 2 };
        let max_run = ((len - 1 - extra) / stride + 1).clamp(1, 5);
        let run = rng.gen_range(1..=max_run);
        let start = rng.gen_range(0..=(len - 1 - extra - (run - 1) * stride));
        // Kept >= 0 for every k <= 4: base >= 16 and delta >= -2.
        let base: i64 = rng.gen_range(16..64);
        let delta: i64 = [-2, 1, 3, 8][rng.gen_range(0..4usize)];
        for k in 0..run {
            let i = start + k * stride;
            match shape {
                0 => writeln!(body, "  o[{i}] = a[{i}] + b[{i}];").unwrap(),
                1 => writeln!(body, "  o[{i}] = a[{i}] * 3;").unwrap(),
                2 => writeln!(body, "  o[{i}] = (a[{i}] << 2) ^ b[{i}];").unwrap(),
                3 => writeln!(body, "  o[{i}] = a[{i}] & {};", base + k * delta).unwrap(),
                4 => writeln!(body, "  o[{i}] = a[{}] + b[{i}];", i + 1).unwrap(),
                _ => writeln!(body, "  o[{i}] = b[{i}] | 1;").unwrap(),
            }
        }
    }
    format!("void k{seed}(const u64 a[{len}], const u64 b[{len}], u64 o[{len}]) {{\n{body}}}\n")
}
