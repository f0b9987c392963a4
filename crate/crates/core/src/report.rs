//! JSON and CSV report records.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::method::{Method, MethodRun};
use crate::tensor::{mask_sparsity, SparsityConfig};

/// Per-layer result written by `prune`.
#[derive(Debug, Clone, Serialize)]
pub struct PruneReport {
    pub config: SparsityConfig,
    pub method: Method,
    pub relative_error: f64,
    pub absolute_error: f64,
    pub block_error_trajectory: Vec<f64>,
    #[serde(rename = "R_rel")]
    pub r_rel: f64,
    pub was_reordered: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    pub timings_ms: BTreeMap<String, f64>,
    pub achieved_sparsity: f64,
    pub pattern_valid: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySummary>,
}

impl PruneReport {
    pub fn from_run(
        run: &MethodRun,
        config: &SparsityConfig,
        timings_ms: BTreeMap<String, f64>,
    ) -> Self {
        let o = &run.outcome;
        Self {
            config: *config,
            method: run.method,
            relative_error: o.relative_error,
            absolute_error: o.final_error,
            block_error_trajectory: o.block_error_trajectory.clone(),
            r_rel: run.profile.relative_range,
            was_reordered: run.was_reordered(),
            permutation: run
                .plan
                .as_ref()
                .filter(|p| p.was_reordered)
                .map(|p| p.permutation.forward().to_vec()),
            timings_ms,
            achieved_sparsity: mask_sparsity(&o.mask),
            pattern_valid: o.mask.satisfies_pattern(),
            warnings: o.warnings.clone(),
            verify: None,
        }
    }
}

/// Outcome of an engine-versus-oracle cross-check.
#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub masks_equal: bool,
    pub final_error_rel_diff: f64,
}

/// One row of the method comparison CSV.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub method: Method,
    pub sparsity: f64,
    pub relative_error: f64,
    pub r_rel: f64,
    pub was_reordered: bool,
    pub wall_ms: f64,
}

pub const COMPARE_HEADER: &str = "method,sparsity,relative_error,r_rel,was_reordered,wall_ms";

/// Per-layer columnar verdict written by `detect`.
#[derive(Debug, Clone, Serialize)]
pub struct DetectRecord {
    pub layer: String,
    #[serde(rename = "R_rel")]
    pub r_rel: f64,
    pub columnar: bool,
    pub block_losses: Vec<f64>,
}
