//! Transform-variant enumeration.
//!
//! Candidate transforms are proposed stage by stage in a fixed order
//! (interchange, pad, fuse, perfectize, branch elimination, strength
//! reduction, tiling, outlining). Within a stage, candidate subsets are
//! grown breadth-first from each entry variant, so small edits enumerate
//! before long combinations when the cap truncates the space. Illegal
//! candidates are skipped silently — legality lives in `apply_transform` —
//! and structurally identical results deduplicate, keeping the first
//! occurrence. The untransformed program is always variant 0.

use super::transform::{apply_transform, Transform};
use crate::ir::*;
use std::collections::{BTreeSet, VecDeque};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExploreConfig {
    /// Hard cap on enumerated variants, untransformed included.
    pub max_variants: usize,
    /// Hard cap on directive sets per variant.
    pub max_pragma_sets: usize,
    /// Largest unroll factor offered.
    pub max_unroll: u32,
    /// Tile factors proposed per loop (those dividing the trip apply).
    pub tile_factors: Vec<i64>,
}

impl Default for ExploreConfig {
    fn default() -> ExploreConfig {
        ExploreConfig {
            max_variants: 64,
            max_pragma_sets: 256,
            max_unroll: 16,
            tile_factors: vec![2, 4],
        }
    }
}

/// One rewritten program together with the edits that produced it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Variant {
    pub program: StructuredProgram,
    pub transforms: Vec<Transform>,
}

/// Enumerates legal transform combinations of `s`, capped and deduplicated.
pub fn enumerate_variants(s: &StructuredProgram, cfg: &ExploreConfig) -> Vec<Variant> {
    let mut pool = vec![Variant { program: s.clone(), transforms: Vec::new() }];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    seen.insert(key(s));

    let stages: [fn(&StructuredProgram, &ExploreConfig) -> Vec<Transform>; 8] = [
        propose_interchange,
        propose_pad,
        propose_fuse,
        propose_perfectize,
        propose_branch_eliminate,
        propose_strength_reduce,
        propose_tile,
        propose_outline,
    ];
    for stage in stages {
        run_stage(&mut pool, &mut seen, cfg, stage);
        if pool.len() >= cfg.max_variants {
            break;
        }
    }
    pool.truncate(cfg.max_variants);
    pool
}

fn key(s: &StructuredProgram) -> String {
    serde_json::to_string(s).expect("program serializes")
}

/// Applies subsets of one stage's candidates to every variant present at
/// stage entry. Candidates are fixed per entry variant; growing a subset
/// only ever appends candidates with larger indices, so each subset is
/// built exactly once, in size order.
fn run_stage(
    pool: &mut Vec<Variant>,
    seen: &mut BTreeSet<String>,
    cfg: &ExploreConfig,
    propose: fn(&StructuredProgram, &ExploreConfig) -> Vec<Transform>,
) {
    let entry_count = pool.len();
    for vi in 0..entry_count {
        if pool.len() >= cfg.max_variants {
            return;
        }
        let candidates = propose(&pool[vi].program, cfg);
        if candidates.is_empty() {
            continue;
        }
        let mut frontier: VecDeque<(usize, usize)> = VecDeque::new();
        frontier.push_back((vi, 0));
        while let Some((pi, start)) = frontier.pop_front() {
            for (ci, t) in candidates.iter().enumerate().skip(start) {
                if pool.len() >= cfg.max_variants {
                    return;
                }
                let Ok(program) = apply_transform(&pool[pi].program, t) else {
                    continue;
                };
                if !seen.insert(key(&program)) {
                    continue;
                }
                let mut transforms = pool[pi].transforms.clone();
                transforms.push(t.clone());
                pool.push(Variant { program, transforms });
                frontier.push_back((pool.len() - 1, ci + 1));
            }
        }
    }
}

// ------------------------------------------------------------- proposers

/// Sibling `For` positions per body, pre-order.
fn sibling_groups(s: &StructuredProgram) -> Vec<Vec<ForLoop>> {
    fn go(nodes: &[Node], out: &mut Vec<Vec<ForLoop>>) {
        let here: Vec<ForLoop> = nodes
            .iter()
            .filter_map(|n| match n {
                Node::For(l) => Some(l.clone()),
                _ => None,
            })
            .collect();
        if here.len() >= 2 {
            out.push(here);
        }
        for n in nodes {
            if let Node::For(l) = n {
                go(&l.body, out);
            }
        }
    }
    let mut out = Vec::new();
    go(&s.body, &mut out);
    out
}

fn propose_interchange(s: &StructuredProgram, _: &ExploreConfig) -> Vec<Transform> {
    s.loops()
        .into_iter()
        .filter_map(|(l, _)| {
            let [Node::For(inner)] = &l.body[..] else { return None };
            inner.body.iter().all(|n| matches!(n, Node::Stmt(_))).then(|| {
                Transform::Interchange { outer: l.label.clone(), inner: inner.label.clone() }
            })
        })
        .collect()
}

fn propose_pad(s: &StructuredProgram, _: &ExploreConfig) -> Vec<Transform> {
    // Pad exists to align iteration spaces, so target each sibling's trip.
    let mut out = Vec::new();
    for group in sibling_groups(s) {
        for a in &group {
            for b in &group {
                let (Some(ta), Some(tb)) = (a.const_trip_count(), b.const_trip_count()) else {
                    continue;
                };
                if a.start == b.start && a.step == b.step && ta < tb {
                    out.push(Transform::Pad { label: a.label.clone(), new_trip: tb });
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn propose_fuse(s: &StructuredProgram, _: &ExploreConfig) -> Vec<Transform> {
    // All ordered sibling pairs, not only adjacent ones: a pair blocked by a
    // loop between them becomes adjacent once that loop fuses away.
    let mut out = Vec::new();
    for group in sibling_groups(s) {
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                if (a.start, &a.stop, a.step) == (b.start, &b.stop, b.step) {
                    out.push(Transform::Fuse {
                        first: a.label.clone(),
                        second: b.label.clone(),
                    });
                }
            }
        }
    }
    out
}

fn propose_perfectize(s: &StructuredProgram, _: &ExploreConfig) -> Vec<Transform> {
    s.loops()
        .into_iter()
        .filter_map(|(l, _)| {
            let fors = l.body.iter().filter(|n| matches!(n, Node::For(_))).count();
            (fors == 1 && l.body.len() > 1)
                .then(|| Transform::Perfectize { label: l.label.clone() })
        })
        .collect()
}

fn propose_branch_eliminate(s: &StructuredProgram, _: &ExploreConfig) -> Vec<Transform> {
    s.loops()
        .into_iter()
        .filter_map(|(l, _)| {
            matches!(l.stop, Bound::Var { .. })
                .then(|| Transform::BranchEliminate { label: l.label.clone() })
        })
        .collect()
}

fn propose_strength_reduce(s: &StructuredProgram, _: &ExploreConfig) -> Vec<Transform> {
    // Mirrors the rewrite's domain rules: multiplies inside array subscripts
    // and shift amounts are address arithmetic and stay untouched.
    fn value_pow2_mul(e: &Expr) -> bool {
        match e {
            Expr::Lit { .. } | Expr::Var { .. } | Expr::LoopVar { .. } | Expr::Read { .. } => {
                false
            }
            Expr::Not(a) | Expr::Trunc { arg: a, .. } | Expr::Zext { arg: a, .. } => {
                value_pow2_mul(a)
            }
            Expr::Bin { op: BinOp::Shl | BinOp::Shr, lhs, .. } => value_pow2_mul(lhs),
            Expr::Bin { op: BinOp::Mul, lhs, rhs } => {
                let pow2 =
                    |e: &Expr| matches!(e, Expr::Lit { value, .. } if value.is_power_of_two());
                pow2(lhs) || pow2(rhs) || value_pow2_mul(lhs) || value_pow2_mul(rhs)
            }
            Expr::Bin { lhs, rhs, .. } => value_pow2_mul(lhs) || value_pow2_mul(rhs),
            Expr::Cmov { flag, if_zero, if_nonzero, .. } => {
                value_pow2_mul(flag) || value_pow2_mul(if_zero) || value_pow2_mul(if_nonzero)
            }
        }
    }

    let mut out = Vec::new();
    let mut pos = 0usize;
    fn walk(nodes: &[Node], pos: &mut usize, out: &mut Vec<Transform>) {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    let hit = match &s.rhs {
                        Rhs::Plain(e) => value_pow2_mul(e),
                        Rhs::Wide { args, .. } => args.iter().any(value_pow2_mul),
                    };
                    if hit {
                        out.push(Transform::StrengthReduce { stmt: *pos });
                    }
                    *pos += 1;
                }
                Node::For(l) => walk(&l.body, pos, out),
                Node::Call { .. } => *pos += 1,
            }
        }
    }
    walk(&s.body, &mut pos, &mut out);
    out
}

fn propose_tile(s: &StructuredProgram, cfg: &ExploreConfig) -> Vec<Transform> {
    let mut out = Vec::new();
    for (l, _) in s.loops() {
        let Some(trip) = l.const_trip_count() else { continue };
        for &factor in &cfg.tile_factors {
            if factor >= 2 && factor < trip && trip % factor == 0 {
                out.push(Transform::Tile { label: l.label.clone(), factor });
            }
        }
    }
    out
}

fn propose_outline(s: &StructuredProgram, _: &ExploreConfig) -> Vec<Transform> {
    super::analyze_loops(s)
        .outline_groups
        .into_iter()
        .filter(|g| g.len() >= 2)
        .map(|group| Transform::Outline { group })
        .collect()
}
