//! Design-space construction: loop analysis, bound staticization, legal loop
//! transformations, synthesis-directive enumeration, and oracle-checked
//! design points.

pub mod analyze;
pub mod pragmas;
pub mod space;
pub mod transform;
pub mod variants;

pub use analyze::{analyze_loops, staticize_bounds, LoopInfo, LoopSummary, StaticizeError};
pub use pragmas::enumerate_pragmas;
pub use space::{
    refine_design_space, score_design_space, synthesize_design_space, DesignPoint, SpaceError,
};
pub use transform::{apply_transform, Transform, TransformError};
pub use variants::{enumerate_variants, ExploreConfig, Variant};

use crate::emit::PragmaLine;
use std::collections::{BTreeMap, BTreeSet};

/// One set of synthesis directives layered over a program without touching
/// its IR.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PragmaConfig {
    /// Loop label -> requested initiation interval (≥ 1).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pipeline: BTreeMap<String, u32>,
    /// Loop label -> unroll factor; must divide the trip count.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub unroll: BTreeMap<String, u32>,
    /// Array -> cyclic partition factor; must divide the length.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub partition: BTreeMap<String, u32>,
    /// Arrays asserted free of inter-iteration hazards. Only set when
    /// analysis proved no carried dependence on the array.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub dependence_free: BTreeSet<String>,
}

impl PragmaConfig {
    pub fn is_empty(&self) -> bool {
        self.pipeline.is_empty()
            && self.unroll.is_empty()
            && self.partition.is_empty()
            && self.dependence_free.is_empty()
    }

    /// Renders the configuration as emission-ready directive lines.
    pub fn to_pragma_lines(&self) -> Vec<PragmaLine> {
        let mut lines = Vec::new();
        for (label, ii) in &self.pipeline {
            lines.push(PragmaLine::Pipeline { loop_label: label.clone(), ii: *ii });
        }
        for (label, factor) in &self.unroll {
            lines.push(PragmaLine::Unroll { loop_label: label.clone(), factor: *factor });
        }
        for (array, factor) in &self.partition {
            lines.push(PragmaLine::ArrayPartition { variable: array.clone(), factor: *factor });
        }
        for array in &self.dependence_free {
            // Anchor to the pipelined loop when there is exactly one, else to
            // the first loop label alphabetically.
            let label = self.pipeline.keys().next().cloned().unwrap_or_default();
            lines.push(PragmaLine::Dependence { loop_label: label, variable: array.clone() });
        }
        lines.sort();
        lines
    }
}
