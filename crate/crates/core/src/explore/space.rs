//! Design-space assembly: every (variant, directive set) pair becomes one
//! design point, and every variant is certified bit-exact against the input
//! program before any point built on it is emitted. A certification failure
//! is a hard error — a transform produced a wrong program, and no amount of
//! exploration should paper over that.

use super::pragmas::{self, enumerate_pragmas};
use super::transform::Transform;
use super::variants::{enumerate_variants, ExploreConfig};
use super::PragmaConfig;
use crate::ir::StructuredProgram;
use crate::oracle::{check_equiv, EquivConfig, EquivError, EquivVerdict};
use crate::qor::{
    estimate, pareto_front, resource_percent, DeviceProfile, EstimateError, EstimatorParams, QoR,
    ScoredPoint,
};
use rayon::prelude::*;
use std::collections::BTreeSet;

/// One candidate implementation: a rewritten program plus directives.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DesignPoint {
    /// Stable index: variant-major, directive-set-minor enumeration order.
    pub id: u64,
    pub program: StructuredProgram,
    pub transforms: Vec<Transform>,
    pub pragmas: PragmaConfig,
    /// Filled by `score_design_space`.
    pub qor: Option<QoR>,
}

#[derive(Debug, thiserror::Error)]
pub enum SpaceError {
    #[error("equivalence check could not run: {0}")]
    Equiv(#[from] EquivError),
    #[error(
        "variant [{transforms}] diverges from the reference at {location} (seed {seed})"
    )]
    Diverged { transforms: String, location: String, seed: u64 },
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

/// Builds the full design space for `s`. Variant generation is sequential
/// (ids must be reproducible); certification and directive enumeration run
/// in parallel per variant.
pub fn synthesize_design_space(
    s: &StructuredProgram,
    cfg: &ExploreConfig,
    equiv: &EquivConfig,
    params: &EstimatorParams,
) -> Result<Vec<DesignPoint>, SpaceError> {
    let variants = enumerate_variants(s, cfg);

    let configs_per_variant: Vec<Result<Vec<PragmaConfig>, SpaceError>> = variants
        .par_iter()
        .map(|v| {
            let verdict = check_equiv(s, &v.program, equiv)?;
            if let EquivVerdict::NotEquivalent { location, seed, .. } = verdict {
                let transforms = v
                    .transforms
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(SpaceError::Diverged { transforms, location, seed });
            }
            Ok(enumerate_pragmas(&v.program, cfg, params)?)
        })
        .collect();

    let mut points = Vec::new();
    let mut id = 0u64;
    for (v, configs) in variants.into_iter().zip(configs_per_variant) {
        for pragmas in configs? {
            points.push(DesignPoint {
                id,
                program: v.program.clone(),
                transforms: v.transforms.clone(),
                pragmas,
                qor: None,
            });
            id += 1;
        }
    }
    Ok(points)
}

/// Predicts cost for every point in place.
pub fn score_design_space(
    points: &mut [DesignPoint],
    params: &EstimatorParams,
) -> Result<(), EstimateError> {
    points.par_iter_mut().try_for_each(|p| {
        p.qor = Some(estimate(&p.program, &p.pragmas, params)?);
        Ok(())
    })
}

/// Identity of a point up to score: the program and its directives. Used to
/// avoid re-adding a configuration the space already holds.
fn point_key(program: &StructuredProgram, pragmas: &PragmaConfig) -> String {
    serde_json::to_string(&(program, pragmas)).expect("point serialization")
}

/// Grows the scored space around its Pareto front for `rounds` rounds. Each
/// round takes every front point and proposes single-move directive
/// neighbors — one unroll step up or down the loop's legal ladder, or
/// pipelining toggled — scoring and appending whatever the space has not
/// seen. Enumeration caps can clip the initial cross product; this walks
/// past them along the front. Existing points are never dropped, so the
/// front only improves or stays put between rounds.
pub fn refine_design_space(
    points: &mut Vec<DesignPoint>,
    rounds: u32,
    cfg: &ExploreConfig,
    params: &EstimatorParams,
    dev: &DeviceProfile,
) -> Result<(), SpaceError> {
    let mut next_id = points.iter().map(|p| p.id).max().map_or(0, |m| m + 1);
    let mut seen: BTreeSet<String> =
        points.iter().map(|p| point_key(&p.program, &p.pragmas)).collect();

    for _ in 0..rounds {
        let scored: Vec<ScoredPoint> = points
            .iter()
            .filter_map(|p| {
                p.qor.map(|q| ScoredPoint {
                    id: p.id,
                    latency_cycles: q.latency_cycles,
                    r: resource_percent(&q, dev),
                })
            })
            .collect();

        let mut fresh: Vec<DesignPoint> = Vec::new();
        for sp in pareto_front(scored) {
            let p = points.iter().find(|p| p.id == sp.id).expect("front id from points");
            let opts = pragmas::loop_options(&p.program, cfg, params)?;
            let current: Vec<(u32, Option<u32>)> = opts
                .iter()
                .map(|o| {
                    (
                        p.pragmas.unroll.get(&o.label).copied().unwrap_or(1),
                        p.pragmas.pipeline.get(&o.label).copied(),
                    )
                })
                .collect();

            for (k, o) in opts.iter().enumerate() {
                let (u, ii) = current[k];
                let mut moves: Vec<(u32, Option<u32>)> = Vec::new();
                if let Some(pos) = o.unroll.iter().position(|&f| f == u) {
                    if pos + 1 < o.unroll.len() {
                        moves.push((o.unroll[pos + 1], ii));
                    }
                    if pos > 0 {
                        moves.push((o.unroll[pos - 1], ii));
                    }
                }
                let toggled = match ii {
                    Some(_) => None,
                    None => o.ii.iter().copied().flatten().next(),
                };
                moves.push((u, toggled));

                for mv in moves {
                    let mut pragmas = PragmaConfig::default();
                    for (j, oj) in opts.iter().enumerate() {
                        let (f, i) = if j == k { mv } else { current[j] };
                        pragmas = pragmas::apply_options(&pragmas, oj, f, i);
                    }
                    if seen.insert(point_key(&p.program, &pragmas)) {
                        fresh.push(DesignPoint {
                            id: 0,
                            program: p.program.clone(),
                            transforms: p.transforms.clone(),
                            pragmas,
                            qor: None,
                        });
                    }
                }
            }
        }

        for mut p in fresh {
            p.id = next_id;
            next_id += 1;
            p.qor = Some(estimate(&p.program, &p.pragmas, params)?);
            points.push(p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_str;

    fn parse(src: &str) -> StructuredProgram {
        let p = parse_str(src).unwrap();
        crate::ir::validate_structured(&p).unwrap();
        p
    }

    #[test]
    fn points_count_is_the_sum_over_variants() {
        let p = parse(
            "void k(const u64 a[8], u64 o[8]) {
               L0: for (i64 v = 0; v < 8; v += 1) { o[v] = a[v] + a[v]; }
             }",
        );
        let cfg = ExploreConfig { max_unroll: 4, ..Default::default() };
        let points =
            synthesize_design_space(&p, &cfg, &EquivConfig::default(), &EstimatorParams::default())
                .unwrap();

        // Three variants (rolled, tile 2, tile 4); per-variant counts are the
        // per-loop option products.
        let variants = enumerate_variants(&p, &cfg);
        let expected: usize = variants
            .iter()
            .map(|v| enumerate_pragmas(&v.program, &cfg, &EstimatorParams::default()).unwrap().len())
            .sum();
        assert_eq!(points.len(), expected);
        assert_eq!(variants.len(), 3);

        // Ids are dense and follow enumeration order.
        for (k, pt) in points.iter().enumerate() {
            assert_eq!(pt.id, k as u64);
            assert!(pt.qor.is_none());
        }
    }

    #[test]
    fn scoring_fills_every_point() {
        let p = parse(
            "void k(const u64 a[8], const u64 b[8], u64 o[1]) {
               L0: for (i64 v = 0; v < 8; v += 1) { o[0] = o[0] + a[v] * b[v]; }
             }",
        );
        let cfg = ExploreConfig::default();
        let mut points =
            synthesize_design_space(&p, &cfg, &EquivConfig::default(), &EstimatorParams::default())
                .unwrap();
        score_design_space(&mut points, &EstimatorParams::default()).unwrap();
        assert!(points.iter().all(|pt| pt.qor.is_some()));
        // The rolled, unpipelined point must be strictly cheaper in DSPs than
        // a fully unrolled one.
        let rolled = points
            .iter()
            .find(|pt| pt.transforms.is_empty() && pt.pragmas.is_empty())
            .unwrap();
        let unrolled = points
            .iter()
            .find(|pt| {
                pt.transforms.is_empty() && pt.pragmas.unroll.get("L0") == Some(&8)
            })
            .unwrap();
        assert!(rolled.qor.unwrap().dsp_used < unrolled.qor.unwrap().dsp_used);
        assert!(rolled.qor.unwrap().latency_cycles > unrolled.qor.unwrap().latency_cycles);
    }

    #[test]
    fn refinement_walks_past_the_enumeration_cap() {
        // One directive set per variant survives the cap, so the initial
        // space is all-default. Refinement then climbs the unroll ladder and
        // toggles pipelining, strictly improving the best latency.
        let p = parse(
            "void k(const u64 a[8], const u64 b[8], u64 o[1]) {
               L0: for (i64 v = 0; v < 8; v += 1) { o[0] = o[0] + a[v] * b[v]; }
             }",
        );
        let cfg = ExploreConfig { max_pragma_sets: 1, max_unroll: 8, ..Default::default() };
        let params = EstimatorParams::default();
        let dev = DeviceProfile::default();
        let mut points =
            synthesize_design_space(&p, &cfg, &EquivConfig::default(), &params).unwrap();
        score_design_space(&mut points, &params).unwrap();
        assert!(points.iter().all(|pt| pt.pragmas.is_empty()));

        let min_latency = |pts: &[DesignPoint]| {
            pts.iter().filter_map(|p| p.qor).map(|q| q.latency_cycles).min().unwrap()
        };
        let front_hv = |pts: &[DesignPoint]| {
            let scored: Vec<ScoredPoint> = pts
                .iter()
                .filter_map(|p| {
                    p.qor.map(|q| ScoredPoint {
                        id: p.id,
                        latency_cycles: q.latency_cycles,
                        r: resource_percent(&q, &dev),
                    })
                })
                .collect();
            // Fixed, generous reference corner so rounds are comparable.
            crate::qor::hypervolume(&pareto_front(scored), 1e9, 1e3)
        };

        let before_latency = min_latency(&points);
        let mut last_hv = front_hv(&points);
        for _ in 0..3 {
            refine_design_space(&mut points, 1, &cfg, &params, &dev).unwrap();
            let hv = front_hv(&points);
            assert!(hv >= last_hv, "front regressed: {hv} < {last_hv}");
            last_hv = hv;
        }
        assert!(min_latency(&points) < before_latency);
        assert!(points.iter().any(|pt| !pt.pragmas.is_empty()));

        // New points are scored, ids stay dense and unique.
        for (k, pt) in points.iter().enumerate() {
            assert_eq!(pt.id, k as u64);
            assert!(pt.qor.is_some());
        }

        // A saturated space has no unseen neighbors left to add.
        let n = points.len();
        let full = ExploreConfig { max_unroll: 8, ..Default::default() };
        let mut all = synthesize_design_space(&p, &full, &EquivConfig::default(), &params).unwrap();
        score_design_space(&mut all, &params).unwrap();
        let size = all.len();
        refine_design_space(&mut all, 2, &full, &params, &dev).unwrap();
        assert_eq!(all.len(), size);
        let _ = n;
    }

    #[test]
    fn same_inputs_reproduce_identical_spaces() {
        let p = parse(
            "void k(const u64 a[8], u64 x[8], u64 y[8]) {
               L0: for (i64 v = 0; v < 8; v += 1) { x[v] = a[v] * 4; }
               L1: for (i64 w = 0; w < 8; w += 1) { y[w] = a[w] + a[w]; }
             }",
        );
        let cfg = ExploreConfig::default();
        let run = || {
            let mut pts = synthesize_design_space(
                &p,
                &cfg,
                &EquivConfig::default(),
                &EstimatorParams::default(),
            )
            .unwrap();
            score_design_space(&mut pts, &EstimatorParams::default()).unwrap();
            serde_json::to_string(&pts).unwrap()
        };
        assert_eq!(run(), run());
    }
}
