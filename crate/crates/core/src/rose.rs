//! Loss-ordered pruning: pre-pruning loss estimates, the two-level column
//! and block reorder, columnar-layer detection, and the
//! reorder → prune → reorder-back driver.

use serde::Serialize;

use crate::calibration::{accumulate_hessian, column_norms, ActivationNorms, HessianBundle};
use crate::error::{PruneError, Result};
use crate::obs::{prune_layer, reconstruction_error, PruneOutcome};
use crate::tensor::{
    apply_column_permutation, block_ranges, compose_permutations, prune_count, DenseMatrix,
    Permutation, SparsityConfig, SparsityPattern,
};

/// `S[i][j] = |W[i][j]| · ‖X_j‖₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub scores: DenseMatrix,
}

pub fn importance_scores(w: &DenseMatrix, norms: &ActivationNorms) -> Result<ImportanceScores> {
    if w.cols() != norms.n() {
        return Err(PruneError::Dimension(format!(
            "weights have {} columns, {} activation norms",
            w.cols(),
            norms.n()
        )));
    }
    let scores = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
        w.get(i, j).abs() * norms.norms[j]
    });
    Ok(ImportanceScores { scores })
}

/// One selected pre-pruning candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossEntry {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Estimated pruning loss per column and per block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossProfile {
    /// Width of the reorder unit (`blocksize`, or `m` for N:M).
    pub blocksize: usize,
    pub block_losses: Vec<f64>,
    /// Indexed by original column.
    pub column_losses: Vec<f64>,
    /// Candidates selected in each block.
    #[serde(skip)]
    pub loss_matrix_entries: Vec<Vec<LossEntry>>,
    #[serde(rename = "R_rel")]
    pub relative_range: f64,
}

impl LossProfile {
    pub fn block_count(&self) -> usize {
        self.block_losses.len()
    }
}

/// `(max - min) / mean`, or 0 when the mean is zero.
pub fn relative_range(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return 0.0;
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    (max - min) / mean
}

/// Width of the units the reorder works on.
pub fn reorder_unit(config: &SparsityConfig) -> usize {
    match config.pattern {
        SparsityPattern::SemiStructured { m, .. } => m,
        SparsityPattern::Unstructured { .. } => config.blocksize,
    }
}

/// Pre-prunes each block by score and sums the candidate losses.
///
/// Unstructured: the `round(p · block_elements)` smallest scores of the
/// block (ties to lower column, then lower row). N:M: the `m - n` smallest
/// scores of each row within every `m`-group.
pub fn loss_profile(scores: &ImportanceScores, config: &SparsityConfig) -> Result<LossProfile> {
    config.validate()?;
    let s = &scores.scores;
    let (rows, n) = s.shape();
    let unit = reorder_unit(config);
    let mut column_losses = vec![0.0; n];
    let mut block_losses = Vec::new();
    let mut entries_per_block = Vec::new();
    for range in block_ranges(n, unit) {
        let mut selected = Vec::new();
        match config.pattern {
            SparsityPattern::Unstructured { sparsity } => {
                let mut all: Vec<LossEntry> = range
                    .clone()
                    .flat_map(|j| (0..rows).map(move |i| (i, j)))
                    .map(|(row, col)| LossEntry {
                        row,
                        col,
                        score: s.get(row, col),
                    })
                    .collect();
                all.sort_by(|a, b| {
                    a.score
                        .total_cmp(&b.score)
                        .then(a.col.cmp(&b.col))
                        .then(a.row.cmp(&b.row))
                });
                all.truncate(prune_count(sparsity, rows * range.len()));
                selected = all;
            }
            SparsityPattern::SemiStructured { n: keep, m } => {
                for row in 0..rows {
                    let mut group: Vec<LossEntry> = range
                        .clone()
                        .map(|col| LossEntry {
                            row,
                            col,
                            score: s.get(row, col),
                        })
                        .collect();
                    group.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.col.cmp(&b.col)));
                    selected.extend(group.into_iter().take(m - keep));
                }
            }
        }
        for e in &selected {
            column_losses[e.col] += e.score;
        }
        block_losses.push(range.map(|j| column_losses[j]).sum());
        entries_per_block.push(selected);
    }
    Ok(LossProfile {
        blocksize: unit,
        relative_range: relative_range(&block_losses),
        block_losses,
        column_losses,
        loss_matrix_entries: entries_per_block,
    })
}

/// Sort direction of both reorder stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderDirection {
    /// Highest estimated loss pruned first.
    #[default]
    Descending,
    /// Lowest estimated loss first; the contrast variant.
    Ascending,
}

/// The column order a layer is pruned in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReorderPlan {
    /// `compose(block_stage, column_stage)`.
    pub permutation: Permutation,
    #[serde(skip)]
    pub column_stage: Permutation,
    #[serde(skip)]
    pub block_stage: Permutation,
    pub was_reordered: bool,
    pub threshold_used: f64,
    pub direction: ReorderDirection,
}

impl ReorderPlan {
    pub fn identity(n: usize, threshold: f64, direction: ReorderDirection) -> Self {
        Self {
            permutation: Permutation::identity(n),
            column_stage: Permutation::identity(n),
            block_stage: Permutation::identity(n),
            was_reordered: false,
            threshold_used: threshold,
            direction,
        }
    }
}

/// Stable sort of `idx` by `key`, high first for descending.
fn sort_indices(idx: &mut [usize], key: impl Fn(usize) -> f64, direction: ReorderDirection) {
    match direction {
        ReorderDirection::Descending => idx.sort_by(|&a, &b| key(b).total_cmp(&key(a))),
        ReorderDirection::Ascending => idx.sort_by(|&a, &b| key(a).total_cmp(&key(b))),
    }
}

pub fn build_reorder_plan(profile: &LossProfile, config: &SparsityConfig) -> Result<ReorderPlan> {
    build_reorder_plan_with(profile, config, ReorderDirection::Descending)
}

/// Reorders only when `R_rel > threshold`. Columns are sorted by loss inside
/// their block, then whole blocks are sorted by block loss; both sorts are
/// stable.
pub fn build_reorder_plan_with(
    profile: &LossProfile,
    config: &SparsityConfig,
    direction: ReorderDirection,
) -> Result<ReorderPlan> {
    let n = profile.column_losses.len();
    let unit = profile.blocksize;
    if unit != reorder_unit(config) || profile.block_count() != block_ranges(n, unit).len() {
        return Err(PruneError::Dimension(format!(
            "loss profile with unit {unit} does not match configuration unit {}",
            reorder_unit(config)
        )));
    }
    let threshold = config.columnar_threshold;
    if !(profile.relative_range > threshold) {
        return Ok(ReorderPlan::identity(n, threshold, direction));
    }
    let mut column_forward = Vec::with_capacity(n);
    for range in block_ranges(n, unit) {
        let mut idx: Vec<usize> = range.collect();
        sort_indices(&mut idx, |j| profile.column_losses[j], direction);
        column_forward.extend(idx);
    }
    let column_stage = Permutation::new(column_forward)?;

    let mut order: Vec<usize> = (0..profile.block_count()).collect();
    sort_indices(&mut order, |b| profile.block_losses[b], direction);
    let block_stage = Permutation::from_block_order(n, unit, &order)?;

    Ok(ReorderPlan {
        permutation: compose_permutations(&block_stage, &column_stage)?,
        column_stage,
        block_stage,
        was_reordered: true,
        threshold_used: threshold,
        direction,
    })
}

/// Everything produced by one loss-ordered pruning run.
#[derive(Debug, Clone)]
pub struct RoseResult {
    /// Pruned layer in the original column order.
    pub outcome: PruneOutcome,
    pub plan: ReorderPlan,
    pub profile: LossProfile,
    /// The engine's result in the permuted order, when a reorder happened.
    pub permuted: Option<PruneOutcome>,
}

pub fn rose_prune_layer(
    w: &DenseMatrix,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
) -> Result<RoseResult> {
    rose_prune_layer_with(w, activations, config, ReorderDirection::Descending)
}

pub fn rose_prune_layer_with(
    w: &DenseMatrix,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
    direction: ReorderDirection,
) -> Result<RoseResult> {
    config.validate()?;
    let norms = column_norms(activations)?;
    let scores = importance_scores(w, &norms)?;
    let profile = loss_profile(&scores, config)?;
    let plan = build_reorder_plan_with(&profile, config, direction)?;
    let bundle = accumulate_hessian(activations, config.damp_fraction)?;
    if !plan.was_reordered {
        let outcome = prune_layer(w, &bundle, activations, config)?;
        return Ok(RoseResult {
            outcome,
            plan,
            profile,
            permuted: None,
        });
    }
    let (outcome, permuted) = prune_in_order(w, activations, &bundle, config, &plan.permutation)?;
    Ok(RoseResult {
        outcome,
        plan,
        profile,
        permuted: Some(permuted),
    })
}

/// Prunes `w` with its columns visited in `order`, then maps the result back
/// to the original column order. Returns the restored outcome and the
/// engine's permuted-order outcome.
pub fn prune_in_order(
    w: &DenseMatrix,
    activations: &[DenseMatrix],
    bundle: &HessianBundle,
    config: &SparsityConfig,
    order: &Permutation,
) -> Result<(PruneOutcome, PruneOutcome)> {
    let wp = apply_column_permutation(w, order)?;
    let xp = activations
        .iter()
        .map(|x| apply_column_permutation(x, order))
        .collect::<Result<Vec<_>>>()?;
    let bp = bundle.permuted(order)?;
    let permuted = prune_layer(&wp, &bp, &xp, config)?;

    let back = order.inverted();
    let pruned_weights = apply_column_permutation(&permuted.pruned_weights, &back)?;
    let mask = permuted.mask.permute_columns(&back)?;
    let err = reconstruction_error(w, &pruned_weights, activations)?;
    let warnings = permuted
        .warnings
        .iter()
        .map(|m| format!("(permuted order) {m}"))
        .collect();
    let outcome = PruneOutcome {
        pruned_weights,
        mask,
        block_error_trajectory: permuted.block_error_trajectory.clone(),
        final_error: err.absolute,
        relative_error: err.relative,
        warnings,
    };
    Ok((outcome, permuted))
}

/// Block order with block `from` moved to position `to`; the other blocks
/// keep their relative order.
pub fn move_block(block_count: usize, from: usize, to: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..block_count).filter(|&b| b != from).collect();
    order.insert(to.min(order.len()), from);
    order
}

/// Prunes with an explicitly chosen block order (no loss estimate, no gate).
pub fn prune_with_block_order(
    w: &DenseMatrix,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
    block_order: &[usize],
) -> Result<PruneOutcome> {
    config.validate()?;
    let order = Permutation::from_block_order(w.cols(), config.blocksize, block_order)?;
    let bundle = accumulate_hessian(activations, config.damp_fraction)?;
    Ok(prune_in_order(w, activations, &bundle, config, &order)?.0)
}

/// Distribution of `|w_after - w_before| / |w_before|` over retained weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityHistogram {
    /// Bins of equal width over `[0, 1)`; the last bin also takes `>= 1`.
    pub counts: Vec<usize>,
    pub bin_width: f64,
    pub total: usize,
    pub fraction_under_0_3: f64,
}

/// Relative weight change of every entry that is nonzero both before and
/// after pruning.
pub fn weight_stability_histogram(
    w_before: &DenseMatrix,
    w_after: &DenseMatrix,
    bins: usize,
) -> Result<StabilityHistogram> {
    if w_before.shape() != w_after.shape() {
        return Err(PruneError::Dimension(format!(
            "{:?} vs {:?}",
            w_before.shape(),
            w_after.shape()
        )));
    }
    if bins == 0 {
        return Err(PruneError::InvalidConfig(
            "histogram needs at least one bin".into(),
        ));
    }
    let width = 1.0 / bins as f64;
    let mut counts = vec![0; bins];
    let mut under = 0;
    let mut total = 0;
    for (&b, &a) in w_before.data().iter().zip(w_after.data()) {
        if b == 0.0 || a == 0.0 {
            continue;
        }
        let rel = (a - b).abs() / b.abs();
        counts[((rel / width) as usize).min(bins - 1)] += 1;
        if rel < 0.3 {
            under += 1;
        }
        total += 1;
    }
    Ok(StabilityHistogram {
        counts,
        bin_width: width,
        total,
        fraction_under_0_3: if total == 0 {
            0.0
        } else {
            under as f64 / total as f64
        },
    })
}
