//! Magnitude and Wanda pruning. Neither updates the surviving weights.

use crate::calibration::ActivationNorms;
use crate::error::{PruneError, Result};
use crate::obs::{reconstruction_error, PruneOutcome};
use crate::tensor::{
    block_ranges, prune_count, DenseMatrix, PruneMask, SparsityConfig, SparsityPattern,
};

/// Zeroes the layer-wide smallest `|w|` (or the smallest `m - n` of every
/// N:M group).
pub fn magnitude_prune(
    w: &DenseMatrix,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
) -> Result<PruneOutcome> {
    config.validate()?;
    let mask = match config.pattern {
        SparsityPattern::Unstructured { sparsity } => {
            let (rows, cols) = w.shape();
            let mut entries: Vec<(f64, usize, usize)> = (0..cols)
                .flat_map(|j| (0..rows).map(move |i| (i, j)))
                .map(|(i, j)| (w.get(i, j).abs(), j, i))
                .collect();
            entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut mask = PruneMask::all_kept(rows, cols, config.pattern);
            for &(_, j, i) in entries.iter().take(prune_count(sparsity, rows * cols)) {
                mask.set_kept(i, j, false);
            }
            mask
        }
        SparsityPattern::SemiStructured { n, m } => nm_mask(w, n, m, |i, j| w.get(i, j).abs())?,
    };
    finish(w, mask, activations, config)
}

/// Zeroes, per output row, the smallest `|w_ij| · ‖X_j‖₂`.
pub fn wanda_prune(
    w: &DenseMatrix,
    norms: &ActivationNorms,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
) -> Result<PruneOutcome> {
    config.validate()?;
    if norms.n() != w.cols() {
        return Err(PruneError::Dimension(format!(
            "weights have {} columns, {} activation norms",
            w.cols(),
            norms.n()
        )));
    }
    let score = |i: usize, j: usize| w.get(i, j).abs() * norms.norms[j];
    let mask = match config.pattern {
        SparsityPattern::Unstructured { sparsity } => {
            let (rows, cols) = w.shape();
            let k = prune_count(sparsity, cols);
            let mut mask = PruneMask::all_kept(rows, cols, config.pattern);
            for i in 0..rows {
                let mut idx: Vec<usize> = (0..cols).collect();
                idx.sort_by(|&a, &b| score(i, a).total_cmp(&score(i, b)).then(a.cmp(&b)));
                for &j in &idx[..k] {
                    mask.set_kept(i, j, false);
                }
            }
            mask
        }
        SparsityPattern::SemiStructured { n, m } => nm_mask(w, n, m, score)?,
    };
    finish(w, mask, activations, config)
}

fn nm_mask(
    w: &DenseMatrix,
    n: usize,
    m: usize,
    score: impl Fn(usize, usize) -> f64,
) -> Result<PruneMask> {
    let (rows, cols) = w.shape();
    if cols % m != 0 {
        return Err(PruneError::Dimension(format!(
            "{cols} input channels do not split into groups of {m}"
        )));
    }
    let mut mask = PruneMask::all_kept(rows, cols, SparsityPattern::SemiStructured { n, m });
    for i in 0..rows {
        for g in (0..cols).step_by(m) {
            let mut idx: Vec<usize> = (g..g + m).collect();
            idx.sort_by(|&a, &b| score(i, a).total_cmp(&score(i, b)).then(a.cmp(&b)));
            for &j in &idx[..m - n] {
                mask.set_kept(i, j, false);
            }
        }
    }
    Ok(mask)
}

/// Applies the mask and fills in the error fields. The trajectory zeroes one
/// more block of the mask at a time.
fn finish(
    w: &DenseMatrix,
    mask: PruneMask,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
) -> Result<PruneOutcome> {
    let (rows, cols) = w.shape();
    let mut partial = w.clone();
    let mut trajectory = Vec::new();
    for range in block_ranges(cols, config.blocksize) {
        for i in 0..rows {
            for j in range.clone() {
                if !mask.is_kept(i, j) {
                    partial.set(i, j, 0.0);
                }
            }
        }
        trajectory.push(reconstruction_error(w, &partial, activations)?.absolute);
    }
    let err = reconstruction_error(w, &partial, activations)?;
    Ok(PruneOutcome {
        pruned_weights: partial,
        mask,
        block_error_trajectory: trajectory,
        final_error: err.absolute,
        relative_error: err.relative,
        warnings: Vec::new(),
    })
}
