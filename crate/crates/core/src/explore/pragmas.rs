//! Synthesis-directive enumeration.
//!
//! Each loop contributes a small option list — unroll factors that divide
//! its trip count, and pipelining at the smallest initiation interval its
//! carried dependences allow — and the result is the cross product over all
//! loops, in pre-order, truncated at the configured cap. Array partitioning
//! is never offered independently: it tracks the unroll factor, since ports
//! only need widening when the unrolled body issues parallel accesses.

use super::variants::ExploreConfig;
use super::PragmaConfig;
use crate::ir::*;
use crate::qor::{min_initiation_interval, EstimateError, EstimatorParams};
use std::collections::BTreeMap;

/// Option set one loop contributes to the cross product.
pub(crate) struct LoopOptions {
    pub(crate) label: String,
    /// Unroll factors (1 = leave rolled), ascending.
    pub(crate) unroll: Vec<u32>,
    /// Initiation intervals (`None` = no pipelining).
    pub(crate) ii: Vec<Option<u32>>,
    /// Arrays the loop body touches, with the element count of each.
    arrays: Vec<(String, usize)>,
    /// Arrays with a proven carried dependence; never asserted hazard-free.
    carried: Vec<String>,
}

/// The per-loop option ladders for `s`, in loop pre-order.
pub(crate) fn loop_options(
    s: &StructuredProgram,
    cfg: &ExploreConfig,
    params: &EstimatorParams,
) -> Result<Vec<LoopOptions>, EstimateError> {
    let info = super::analyze_loops(s);
    let env = s.type_env();

    let mut per_loop = Vec::new();
    for (l, _) in s.loops() {
        let summary = info.get(&l.label);
        let mut unroll = vec![1u32];
        if let Some(trip) = l.const_trip_count() {
            for f in 2..=cfg.max_unroll.min(trip.max(0) as u32) {
                if trip % f as i64 == 0 {
                    unroll.push(f);
                }
            }
        }
        let min_ii = min_initiation_interval(s, &l.label, &PragmaConfig::default(), params)?;
        let ii = vec![None, Some(min_ii.min(u32::MAX as u64) as u32)];

        let (arrays, carried) = match summary {
            Some(sm) => (
                sm.strides
                    .keys()
                    .filter_map(|a| env.arrays.get(a).map(|&(_, len)| (a.clone(), len)))
                    .collect(),
                sm.carried_arrays.iter().cloned().collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        per_loop.push(LoopOptions { label: l.label.clone(), unroll, ii, arrays, carried });
    }
    Ok(per_loop)
}

/// Enumerates directive sets for `s`, deduplicated by construction and
/// capped at `cfg.max_pragma_sets`. A loop-free program yields exactly one
/// empty configuration.
pub fn enumerate_pragmas(
    s: &StructuredProgram,
    cfg: &ExploreConfig,
    params: &EstimatorParams,
) -> Result<Vec<PragmaConfig>, EstimateError> {
    let per_loop = loop_options(s, cfg, params)?;

    let mut configs = vec![PragmaConfig::default()];
    for opts in &per_loop {
        let mut next = Vec::new();
        'grow: for base in &configs {
            for &f in &opts.unroll {
                for &ii in &opts.ii {
                    next.push(apply_options(base, opts, f, ii));
                    if next.len() >= cfg.max_pragma_sets {
                        break 'grow;
                    }
                }
            }
        }
        configs = next;
    }
    Ok(configs)
}

pub(crate) fn apply_options(
    base: &PragmaConfig,
    opts: &LoopOptions,
    unroll: u32,
    ii: Option<u32>,
) -> PragmaConfig {
    let mut c = base.clone();
    if unroll > 1 {
        c.unroll.insert(opts.label.clone(), unroll);
        for (array, len) in &opts.arrays {
            if *len % unroll as usize == 0 {
                let slot = c.partition.entry(array.clone()).or_insert(unroll);
                *slot = (*slot).max(unroll);
            }
        }
    }
    if let Some(ii) = ii {
        c.pipeline.insert(opts.label.clone(), ii);
        for (array, _) in &opts.arrays {
            if !opts.carried.contains(array) {
                c.dependence_free.insert(array.clone());
            }
        }
    }
    c
}

/// Convenience map: loop label -> smallest legal initiation interval.
pub fn min_ii_by_loop(
    s: &StructuredProgram,
    params: &EstimatorParams,
) -> Result<BTreeMap<String, u64>, EstimateError> {
    let mut out = BTreeMap::new();
    for (l, _) in s.loops() {
        out.insert(
            l.label.clone(),
            min_initiation_interval(s, &l.label, &PragmaConfig::default(), params)?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_str;

    fn parse(src: &str) -> StructuredProgram {
        let p = parse_str(src).unwrap();
        validate_structured(&p).unwrap();
        p
    }

    fn cfg(max_unroll: u32) -> ExploreConfig {
        ExploreConfig { max_unroll, ..ExploreConfig::default() }
    }

    #[test]
    fn independent_trip8_loop_yields_six_configs() {
        let p = parse(
            "void k(const u64 a[8], u64 o[8]) {
               L0: for (i64 v = 0; v < 8; v += 1) { o[v] = a[v] + a[v]; }
             }",
        );
        let configs = enumerate_pragmas(&p, &cfg(4), &EstimatorParams::default()).unwrap();
        assert_eq!(configs.len(), 6);

        // Unroll options 1/2/4 crossed with pipelining off or at the minimum
        // legal interval, which is 1 for a dependence-free body.
        let shapes: Vec<(Option<u32>, Option<u32>)> = configs
            .iter()
            .map(|c| (c.unroll.get("L0").copied(), c.pipeline.get("L0").copied()))
            .collect();
        for f in [None, Some(2), Some(4)] {
            for ii in [None, Some(1)] {
                assert!(shapes.contains(&(f, ii)), "missing unroll={f:?} ii={ii:?}");
            }
        }
        // Partitioning rides along with unrolling and matches its factor.
        for c in &configs {
            match c.unroll.get("L0") {
                Some(&f) => {
                    assert_eq!(c.partition.get("a"), Some(&f));
                    assert_eq!(c.partition.get("o"), Some(&f));
                }
                None => assert!(c.partition.is_empty()),
            }
        }
    }

    #[test]
    fn carried_multiply_pins_the_initiation_interval() {
        // t[v] depends on t[v-1] through a 4-cycle multiply: the loop cannot
        // start a new iteration more often than every 4 cycles.
        let p = parse(
            "void k(const u64 c[1], u64 t[8]) {
               L0: for (i64 v = 1; v < 8; v += 1) { t[v] = t[v - 1] * c[0]; }
             }",
        );
        let configs = enumerate_pragmas(&p, &cfg(16), &EstimatorParams::default()).unwrap();
        // Trip 7: unroll 1 or 7, pipelined or not.
        assert_eq!(configs.len(), 4);
        for c in &configs {
            if let Some(&ii) = c.pipeline.get("L0") {
                assert_eq!(ii, 4);
                // The carried array is never asserted hazard-free.
                assert!(!c.dependence_free.contains("t"));
                assert!(c.dependence_free.contains("c"));
            }
        }
    }

    #[test]
    fn loop_free_program_gets_one_empty_config() {
        let p = parse("void k(const u64 a[2], u64 o[1]) { o[0] = a[0] * a[1]; }");
        let configs = enumerate_pragmas(&p, &cfg(16), &EstimatorParams::default()).unwrap();
        assert_eq!(configs.len(), 1);
        assert!(configs[0].is_empty());
    }

    #[test]
    fn cross_product_respects_the_cap() {
        let p = parse(
            "void k(const u64 a[16], u64 x[16], u64 y[16]) {
               L0: for (i64 v = 0; v < 16; v += 1) { x[v] = a[v] + a[v]; }
               L1: for (i64 w = 0; w < 16; w += 1) { y[w] = a[w] * a[w]; }
             }",
        );
        let tight = ExploreConfig { max_pragma_sets: 7, max_unroll: 16, ..Default::default() };
        let configs = enumerate_pragmas(&p, &tight, &EstimatorParams::default()).unwrap();
        assert_eq!(configs.len(), 7);
        let uncapped = ExploreConfig { max_unroll: 16, ..Default::default() };
        let all = enumerate_pragmas(&p, &uncapped, &EstimatorParams::default()).unwrap();
        // Divisors of 16 up to 16 are {1,2,4,8,16}; two loops, two II choices.
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn min_ii_map_covers_every_loop() {
        let p = parse(
            "void k(const u64 a[8], u64 x[8], u64 t[8]) {
               L0: for (i64 v = 0; v < 8; v += 1) { x[v] = a[v] + a[v]; }
               L1: for (i64 w = 1; w < 8; w += 1) { t[w] = t[w - 1] * a[w]; }
             }",
        );
        let map = min_ii_by_loop(&p, &EstimatorParams::default()).unwrap();
        assert_eq!(map.get("L0"), Some(&1));
        assert_eq!(map.get("L1"), Some(&4));
    }
}
