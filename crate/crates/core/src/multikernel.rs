//! Joint deployment of several kernels on one device.
//!
//! When kernels run side by side, their resource demands add while the
//! effective latency is governed by the slowest member. Selection therefore
//! enumerates one implementation per kernel, totals each combination, keeps
//! the nondominated ones, and picks within a DSP budget.

use crate::qor::{npi, pareto_front, resource_percent, DeviceProfile, Objective, QoR, Weights};
use rayon::prelude::*;

/// When the selection product exceeds the caller's limit, each front is cut
/// to this many best-scoring points before enumeration.
const PRUNE_KEEP: usize = 16;

/// One implementation choice: the design id it came from plus its cost.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrontPoint {
    pub design_id: u64,
    pub qor: QoR,
}

/// One kernel's nondominated implementations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelFront {
    pub kernel: String,
    pub points: Vec<FrontPoint>,
}

/// One member of a combined design.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Chosen {
    pub kernel: String,
    pub design_id: u64,
    pub qor: QoR,
}

/// A selection of one implementation per kernel, with its summed cost.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CombinedDesign {
    /// Members in input-front order.
    pub selection: Vec<Chosen>,
    /// Resources summed across members; latency is the member maximum.
    pub total: QoR,
}

impl CombinedDesign {
    fn from_selection(selection: Vec<Chosen>) -> CombinedDesign {
        let total = QoR {
            latency_cycles: selection.iter().map(|c| c.qor.latency_cycles).max().unwrap_or(0),
            dsp_used: selection.iter().map(|c| c.qor.dsp_used).sum(),
            lut_used: selection.iter().map(|c| c.qor.lut_used).sum(),
            ff_used: selection.iter().map(|c| c.qor.ff_used).sum(),
            bram_used: selection.iter().map(|c| c.qor.bram_used).sum(),
        };
        CombinedDesign { selection, total }
    }

    /// Lexicographic member ids, the stable tie-break key.
    fn ids(&self) -> Vec<u64> {
        self.selection.iter().map(|c| c.design_id).collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CombineError {
    #[error("no kernel fronts given")]
    NoFronts,
    #[error("kernel `{0}` has an empty front")]
    EmptyFront(String),
}

/// Enumerates one-per-kernel selections, totals them, and keeps the
/// nondominated combinations on the (latency, resource-percent) plane.
/// Fronts whose selection product exceeds `limit` are first pruned to their
/// best-scoring points so enumeration stays tractable.
pub fn combine_fronts(
    fronts: &[KernelFront],
    limit: usize,
    dev: &DeviceProfile,
    w: Weights,
) -> Result<Vec<CombinedDesign>, CombineError> {
    if fronts.is_empty() {
        return Err(CombineError::NoFronts);
    }
    for f in fronts {
        if f.points.is_empty() {
            return Err(CombineError::EmptyFront(f.kernel.clone()));
        }
    }

    let mut working: Vec<KernelFront> = fronts.to_vec();
    let product = || -> usize {
        working.iter().map(|f| f.points.len()).fold(1usize, |a, b| a.saturating_mul(b))
    };
    if product() > limit {
        for f in &mut working {
            prune_to_best(f, PRUNE_KEEP, dev, w);
        }
    }

    // Odometer over per-front indices, partitioned across workers by the
    // first front's choice. Collecting per-slice then flattening keeps the
    // enumeration order (and thus tie-breaks) independent of thread timing.
    let sizes: Vec<usize> = working.iter().map(|f| f.points.len()).collect();
    let tail_product: usize = sizes[1..].iter().product();
    let per_first: Vec<Vec<CombinedDesign>> = (0..sizes[0])
        .into_par_iter()
        .map(|first| {
            let mut out = Vec::with_capacity(tail_product);
            let mut idx = vec![0usize; sizes.len()];
            idx[0] = first;
            loop {
                let selection: Vec<Chosen> = working
                    .iter()
                    .zip(&idx)
                    .map(|(f, &k)| Chosen {
                        kernel: f.kernel.clone(),
                        design_id: f.points[k].design_id,
                        qor: f.points[k].qor,
                    })
                    .collect();
                out.push(CombinedDesign::from_selection(selection));

                // Advance positions 1.., keeping position 0 fixed.
                let mut k = sizes.len() - 1;
                loop {
                    if k == 0 {
                        return out;
                    }
                    idx[k] += 1;
                    if idx[k] < sizes[k] {
                        break;
                    }
                    idx[k] = 0;
                    k -= 1;
                }
            }
        })
        .collect();
    let candidates: Vec<CombinedDesign> = per_first.into_iter().flatten().collect();

    let scored: Vec<Indexed> = candidates
        .iter()
        .enumerate()
        .map(|(k, c)| Indexed {
            id: k as u64,
            latency: c.total.latency_cycles,
            r: resource_percent(&c.total, dev),
        })
        .collect();
    let kept = pareto_front(scored);
    Ok(kept.into_iter().map(|s| candidates[s.id as usize].clone()).collect())
}

struct Indexed {
    id: u64,
    latency: u64,
    r: f64,
}

impl Objective for Indexed {
    fn latency(&self) -> u64 {
        self.latency
    }
    fn resource(&self) -> f64 {
        self.r
    }
    fn id(&self) -> u64 {
        self.id
    }
}

fn prune_to_best(front: &mut KernelFront, keep: usize, dev: &DeviceProfile, w: Weights) {
    if front.points.len() <= keep {
        return;
    }
    let population: Vec<QoR> = front.points.iter().map(|p| p.qor).collect();
    let mut order: Vec<usize> = (0..front.points.len()).collect();
    order.sort_by(|&a, &b| {
        npi(&front.points[a].qor, &population, dev, w)
            .total_cmp(&npi(&front.points[b].qor, &population, dev, w))
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order.sort_unstable();
    front.points = order.into_iter().map(|k| front.points[k]).collect();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Fastest design that fits.
    Latency,
    /// Best latency/resource balance that fits.
    Npi,
}

impl std::str::FromStr for SelectionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<SelectionMode, String> {
        match s {
            "latency" => Ok(SelectionMode::Latency),
            "npi" => Ok(SelectionMode::Npi),
            other => Err(format!("unknown mode `{other}` (expected latency or npi)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("no combined designs to select from")]
    Empty,
    #[error("no combined design fits {budget} DSPs; the cheapest needs {needed}")]
    Infeasible {
        budget: u64,
        needed: u64,
        /// The minimum-DSP design, as a starting point for renegotiation.
        witness: CombinedDesign,
    },
}

/// Picks the best design whose DSP total fits the budget. Ties break toward
/// fewer DSPs, then lexicographically smaller member ids, so selection is
/// insensitive to input order.
pub fn select_under_budget(
    combined: &[CombinedDesign],
    dsp_budget: u64,
    mode: SelectionMode,
    dev: &DeviceProfile,
    w: Weights,
) -> Result<CombinedDesign, SelectError> {
    if combined.is_empty() {
        return Err(SelectError::Empty);
    }
    let population: Vec<QoR> = combined.iter().map(|c| c.total).collect();
    let feasible: Vec<&CombinedDesign> =
        combined.iter().filter(|c| c.total.dsp_used <= dsp_budget).collect();
    if feasible.is_empty() {
        let witness = combined
            .iter()
            .min_by(|a, b| {
                a.total
                    .dsp_used
                    .cmp(&b.total.dsp_used)
                    .then_with(|| a.ids().cmp(&b.ids()))
            })
            .expect("nonempty");
        return Err(SelectError::Infeasible {
            budget: dsp_budget,
            needed: witness.total.dsp_used,
            witness: witness.clone(),
        });
    }

    let best = feasible
        .into_iter()
        .min_by(|a, b| {
            let primary = match mode {
                SelectionMode::Latency => {
                    a.total.latency_cycles.cmp(&b.total.latency_cycles)
                }
                SelectionMode::Npi => npi(&a.total, &population, dev, w)
                    .total_cmp(&npi(&b.total, &population, dev, w)),
            };
            primary
                .then_with(|| a.total.dsp_used.cmp(&b.total.dsp_used))
                .then_with(|| a.ids().cmp(&b.ids()))
        })
        .expect("nonempty");
    Ok(best.clone())
}
