//! End-to-end orchestration of the re-rolling pass.
//!
//! `roll` takes a validated flat kernel through array synthesis,
//! abstraction, saturation, and lowering, then certifies the result against
//! the input before handing it back. Saturation runs once per abstract
//! sequence rather than once over the whole program: every rewrite needs
//! matching template ids on adjacent ops, and same-template runs are
//! maximal and contiguous, so cross-run merges are impossible and the
//! per-run e-graphs reach exactly the states the whole-program graph would
//! — without paying for the product of all segmentations.

use crate::dataflow::{assign_arrays, build_ddg};
use crate::ir::*;
use crate::oracle::{check_equiv_flat, EquivConfig, EquivError, EquivVerdict};
use crate::saturate::{
    extract_best, lower_to_loops, saturate, select_targets, LowerError, RTerm, SaturationConfig,
    TemplateTable,
};
use crate::template::abstract_program;
use serde::Serialize;

#[derive(Debug, Clone, Copy, Default)]
pub struct RollConfig {
    pub saturation: SaturationConfig,
    pub equiv: EquivConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct RollReport {
    pub statements_before: usize,
    pub statements_after: usize,
    pub loops: usize,
    pub truncated: bool,
    pub verdict: EquivVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RollError {
    #[error("input fails validation: {0}")]
    Invalid(#[from] ValidateError),
    #[error("lowering failed: {0}")]
    Lower(#[from] LowerError),
    #[error("equivalence check failed to run: {0}")]
    Equiv(#[from] EquivError),
}

fn count_statements(nodes: &[Node]) -> usize {
    nodes
        .iter()
        .map(|n| match n {
            Node::Stmt(_) => 1,
            Node::For(l) => count_statements(&l.body),
            Node::Call { .. } => 0,
        })
        .sum()
}

/// Re-rolls a flat kernel into loops. The returned program is certified
/// bit-equivalent to `p` on the configured vector battery; the report
/// carries the verdict plus before/after shape counts.
pub fn roll(p: &Program, cfg: &RollConfig) -> Result<(StructuredProgram, RollReport), RollError> {
    validate_straight_line(p)?;
    let ddg = build_ddg(p);
    let (packed, _assignment) = assign_arrays(p, &ddg);
    let abs = abstract_program(&packed);
    let seqs = select_targets(abs.sequences.clone(), &cfg.saturation);

    // Synthetic ids for frozen instances count up across the whole program,
    // mirroring `to_term`/`TemplateTable` numbering.
    let mut next_synthetic = abs.templates.len();
    let mut children: Vec<RTerm> = Vec::new();
    let mut truncated = false;
    for seq in &seqs {
        let ops: Vec<RTerm> = seq
            .instances
            .iter()
            .map(|inst| {
                let id = if seq.excluded {
                    let id = next_synthetic;
                    next_synthetic += 1;
                    id
                } else {
                    seq.template_id
                };
                RTerm::op(id, &inst.consts)
            })
            .collect();
        if seq.excluded || ops.len() < 2 {
            children.extend(ops);
            continue;
        }
        let g = saturate(&RTerm::Seq(ops), &cfg.saturation);
        truncated |= g.truncated;
        match extract_best(&g) {
            RTerm::Seq(best) => children.extend(best),
            other => children.push(other),
        }
    }

    let table = TemplateTable::new(&abs, &seqs);
    let rolled = lower_to_loops(&RTerm::Seq(children), &packed, &table)?;
    let verdict = check_equiv_flat(p, &rolled, &cfg.equiv)?;
    let report = RollReport {
        statements_before: p.body.len(),
        statements_after: count_statements(&rolled.body),
        loops: rolled.loops().len(),
        truncated,
        verdict,
    };
    Ok((rolled, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::unroll;
    use crate::parser::{parse_str, parse_straight_line};

    fn roll_src(src: &str) -> (StructuredProgram, RollReport) {
        roll(&parse_straight_line(src).unwrap(), &RollConfig::default()).unwrap()
    }

    #[test]
    fn uniform_flat_run_becomes_one_loop() {
        let (rolled, report) = roll_src(
            "void f(const u64 a[4], const u64 b[4], u64 o[4]) {\
               o[0] = a[0] * b[0];\
               o[1] = a[1] * b[1];\
               o[2] = a[2] * b[2];\
               o[3] = a[3] * b[3];\
             }",
        );
        assert_eq!(report.loops, 1);
        assert_eq!(rolled.loops()[0].0.const_trip_count(), Some(4));
        assert!(report.verdict.is_equivalent());
        assert_eq!(report.statements_before, 4);
        assert_eq!(report.statements_after, 1);
    }

    #[test]
    fn eight_iteration_fixture_rolls_to_trip_eight() {
        let original = parse_str(
            "void f(const u64 a[8], u64 o[8]) {\
               L0: for (i64 v = 0; v < 8; v += 1) { o[v] = a[v] << 2; }\
             }",
        )
        .unwrap();
        let flat = unroll(&original).unwrap();
        assert_eq!(flat.body.len(), 8);
        let (rolled, report) = roll(&flat, &RollConfig::default()).unwrap();
        assert_eq!(report.loops, 1);
        assert_eq!(rolled.loops()[0].0.const_trip_count(), Some(8));
        assert!(report.verdict.is_equivalent());
    }

    #[test]
    fn descending_strides_survive_the_round_trip() {
        let original = parse_str(
            "void f(const u64 a[8], u64 o[8]) {\
               L0: for (i64 v = 6; v > 1; v += -2) { o[v] = a[v + 1] * a[v - 1]; }\
             }",
        )
        .unwrap();
        let flat = unroll(&original).unwrap();
        let (rolled, report) = roll(&flat, &RollConfig::default()).unwrap();
        assert_eq!(report.loops, 1);
        assert_eq!(
            rolled.loops()[0].0.const_trip_count(),
            original.loops()[0].0.const_trip_count()
        );
        assert!(report.verdict.is_equivalent());
    }

    #[test]
    fn two_result_statements_roll_through_scratch_arrays() {
        let original = parse_str(
            "void f(const u64 a[4], const u64 b[4], u64 hi[4], u64 lo[4]) {\
               L0: for (i64 v = 0; v < 4; v += 1) {\
                 u64 h;\
                 u64 l;\
                 (h, l) = mulwide_u64(a[v], b[v]);\
                 hi[v] = h;\
                 lo[v] = l;\
               }\
             }",
        )
        .unwrap();
        let flat = unroll(&original).unwrap();
        // Three statements per iteration interleave into three separate
        // runs only if templates alternate; here each of the three template
        // kinds forms its own progression, so nothing rolls back into one
        // loop — but the mulwide statements still roll among themselves
        // once the interleaving is broken. This fixture instead checks the
        // conservative outcome: equivalence always holds.
        let (_, report) = roll(&flat, &RollConfig::default()).unwrap();
        assert!(report.verdict.is_equivalent());
    }

    #[test]
    fn rollable_and_fixed_statements_coexist() {
        let (rolled, report) = roll_src(
            "void f(const u64 a[4], const u64 b[4], u64 o[5]) {\
               o[4] = a[0] * a[1] * a[2];\
               o[0] = a[0] + b[0];\
               o[1] = a[1] + b[1];\
               o[2] = a[2] + b[2];\
               o[3] = a[3] + b[3];\
             }",
        );
        assert_eq!(report.loops, 1);
        assert_eq!(report.statements_after, 2);
        assert!(report.verdict.is_equivalent());
        let text = crate::emit::emit_c(&rolled, &[]);
        assert!(text.contains("for ("), "{text}");
    }

    #[test]
    fn min_sequence_threshold_keeps_short_runs_flat() {
        let src = "void f(const u64 a[3], u64 o[3]) {\
               o[0] = a[0] + 1;\
               o[1] = a[1] + 1;\
               o[2] = a[2] + 1;\
             }";
        let p = parse_straight_line(src).unwrap();
        let cfg = RollConfig {
            saturation: SaturationConfig { min_sequence_ops: 4, ..Default::default() },
            ..Default::default()
        };
        let (rolled, report) = roll(&p, &cfg).unwrap();
        assert_eq!(report.loops, 0);
        assert_eq!(count_statements(&rolled.body), 3);
        assert!(report.verdict.is_equivalent());
    }

    #[test]
    fn value_literal_progressions_roll_with_value_affine_holes() {
        let (rolled, report) = roll_src(
            "void f(const u64 a[4], u64 o[4]) {\
               o[0] = a[0] & 7;\
               o[1] = a[1] & 15;\
               o[2] = a[2] & 23;\
               o[3] = a[3] & 31;\
             }",
        );
        assert_eq!(report.loops, 1);
        assert!(report.verdict.is_equivalent());
        let text = crate::emit::emit_c(&rolled, &[]);
        assert!(text.contains("* 8 + 7"), "{text}");
    }

    #[test]
    fn shift_progressions_roll() {
        let (rolled, report) = roll_src(
            "void f(const u64 a[4], u64 o[4]) {\
               o[0] = a[0] << 1;\
               o[1] = a[1] << 3;\
               o[2] = a[2] << 5;\
               o[3] = a[3] << 7;\
             }",
        );
        assert_eq!(report.loops, 1);
        assert!(report.verdict.is_equivalent());
        let text = crate::emit::emit_c(&rolled, &[]);
        assert!(text.contains("<< v0 * 2 + 1"), "{text}");
    }
}
