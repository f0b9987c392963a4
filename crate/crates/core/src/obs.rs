//! Blocked OBS pruning with Cholesky-precomputed compensation.
//!
//! Columns are visited left to right in blocks of `blocksize`. The mask for a
//! block is fixed when the block is entered; each pruned weight's error is
//! then pushed onto the remaining columns of the block using row `q` of the
//! upper factor `U = Lᵀ` of `H⁻¹`. The update to columns past the block is
//! accumulated and applied once the block is done.

use rayon::prelude::*;

use crate::calibration::HessianBundle;
use crate::error::{PruneError, Result};
use crate::tensor::{
    block_ranges, prune_count, DenseMatrix, PruneMask, SparsityConfig, SparsityPattern,
};

/// Inverse-Hessian diagonals below this are treated as degenerate: the
/// weight is dropped without compensation.
pub const INV_DIAG_UNDERFLOW: f64 = 1e-30;

/// Result of pruning one layer.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub pruned_weights: DenseMatrix,
    pub mask: PruneMask,
    /// Reconstruction error against the dense layer after each block.
    pub block_error_trajectory: Vec<f64>,
    pub final_error: f64,
    pub relative_error: f64,
    pub warnings: Vec<String>,
}

/// When cross-block compensation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompensationSchedule {
    /// Batched once per block.
    #[default]
    Lazy,
    /// Immediately after every column.
    Eager,
}

/// Loss increase `w_q² / [H⁻¹]_qq` from removing a single weight.
pub fn obs_saliency(w_q: f64, inv_h_qq: f64) -> Result<f64> {
    if !(inv_h_qq > 0.0) {
        return Err(PruneError::IndefiniteHessian { pivot: 0 });
    }
    Ok(w_q * w_q / inv_h_qq)
}

/// Removes weight `q` from `row` and applies the optimal compensation
/// `Δw = -(w_q / [H⁻¹]_qq) · H⁻¹[:, q]`.
pub fn obs_update_row(row: &[f64], q: usize, inv_h: &DenseMatrix) -> Result<Vec<f64>> {
    let n = row.len();
    if inv_h.shape() != (n, n) || q >= n {
        return Err(PruneError::Dimension(format!(
            "row of length {n}, index {q}, inverse Hessian {:?}",
            inv_h.shape()
        )));
    }
    let d = inv_h.get(q, q);
    if !(d > 0.0) {
        return Err(PruneError::IndefiniteHessian { pivot: q });
    }
    let scale = row[q] / d;
    let mut out: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(j, &w)| w - scale * inv_h.get(j, q))
        .collect();
    out[q] = 0.0;
    Ok(out)
}

/// Picks the block mask from saliencies `w² / inv_h_block_diag[j]`.
///
/// Unstructured: the `round(p · rows · width)` lowest-saliency entries of the
/// whole block, ties going to the lower column, then lower row.
/// N:M: the `m - n` lowest-saliency entries of every aligned `m`-group in
/// each row, ties going to the lower column.
pub fn select_block_mask(
    w_block: &DenseMatrix,
    inv_h_block_diag: &[f64],
    config: &SparsityConfig,
) -> PruneMask {
    select_mask_with_dead(w_block, inv_h_block_diag, config, &[])
}

fn saliency(w: f64, inv_diag: f64) -> f64 {
    if inv_diag > 0.0 {
        w * w / inv_diag
    } else {
        f64::INFINITY
    }
}

/// As [`select_block_mask`], but columns flagged in `dead` rank ahead of
/// every live column.
pub(crate) fn select_mask_with_dead(
    w_block: &DenseMatrix,
    inv_diag: &[f64],
    config: &SparsityConfig,
    dead: &[bool],
) -> PruneMask {
    let (rows, width) = w_block.shape();
    assert_eq!(
        inv_diag.len(),
        width,
        "one inverse diagonal per block column"
    );
    let is_dead = |j: usize| dead.get(j).copied().unwrap_or(false);
    let mut mask = PruneMask::all_kept(rows, width, config.pattern);
    let key = |i: usize, j: usize| (!is_dead(j), saliency(w_block.get(i, j), inv_diag[j]));
    match config.pattern {
        SparsityPattern::Unstructured { sparsity } => {
            let k = prune_count(sparsity, rows * width);
            if k == 0 {
                return mask;
            }
            let mut entries: Vec<(bool, f64, usize, usize)> = (0..width)
                .flat_map(|j| (0..rows).map(move |i| (i, j)))
                .map(|(i, j)| {
                    let (live, s) = key(i, j);
                    (live, s, j, i)
                })
                .collect();
            entries.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.total_cmp(&b.1))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            for &(_, _, j, i) in &entries[..k.min(entries.len())] {
                mask.set_kept(i, j, false);
            }
        }
        SparsityPattern::SemiStructured { n, m } => {
            let drop = m - n;
            for i in 0..rows {
                for g in (0..width).step_by(m) {
                    let mut group: Vec<(bool, f64, usize)> = (g..(g + m).min(width))
                        .map(|j| {
                            let (live, s) = key(i, j);
                            (live, s, j)
                        })
                        .collect();
                    group.sort_by(|a, b| {
                        a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2))
                    });
                    for &(_, _, j) in group.iter().take(drop) {
                        mask.set_kept(i, j, false);
                    }
                }
            }
        }
    }
    mask
}

/// Absolute and relative layer reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionError {
    pub absolute: f64,
    pub relative: f64,
}

/// `‖(W - Ŵ) Xᵀ‖²` over all calibration rows, and its ratio to `‖W Xᵀ‖²`
/// (zero when the dense output is zero).
pub fn reconstruction_error(
    w_dense: &DenseMatrix,
    w_pruned: &DenseMatrix,
    activations: &[DenseMatrix],
) -> Result<ReconstructionError> {
    let delta = w_dense.sub(w_pruned)?;
    let absolute = output_energy(&delta, activations)?;
    let reference = output_energy(w_dense, activations)?;
    let relative = if reference == 0.0 {
        0.0
    } else {
        absolute / reference
    };
    Ok(ReconstructionError { absolute, relative })
}

/// `‖W Xᵀ‖²` summed over every batch.
pub fn output_energy(w: &DenseMatrix, activations: &[DenseMatrix]) -> Result<f64> {
    if let Some(b) = activations.iter().find(|b| b.cols() != w.cols()) {
        return Err(PruneError::Dimension(format!(
            "activations have {} columns, weights have {}",
            b.cols(),
            w.cols()
        )));
    }
    let per_row: Vec<f64> = (0..w.rows())
        .into_par_iter()
        .map(|i| {
            let wr = w.row(i);
            if wr.iter().all(|&v| v == 0.0) {
                return 0.0;
            }
            activations
                .iter()
                .flat_map(|b| (0..b.rows()).map(move |r| b.row(r)))
                .map(|x| {
                    let y: f64 = wr.iter().zip(x).map(|(a, b)| a * b).sum();
                    y * y
                })
                .sum()
        })
        .collect();
    Ok(per_row.iter().sum())
}

/// Prunes `w` in its current column order.
pub fn prune_layer(
    w: &DenseMatrix,
    bundle: &HessianBundle,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
) -> Result<PruneOutcome> {
    prune_layer_with_schedule(w, bundle, activations, config, CompensationSchedule::Lazy)
}

pub fn prune_layer_with_schedule(
    w: &DenseMatrix,
    bundle: &HessianBundle,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
    schedule: CompensationSchedule,
) -> Result<PruneOutcome> {
    config.validate()?;
    let (rows, n) = w.shape();
    if n != bundle.n {
        return Err(PruneError::Dimension(format!(
            "weights have {n} columns, Hessian is {}x{}",
            bundle.n, bundle.n
        )));
    }
    if let Some(b) = activations.iter().find(|b| b.cols() != n) {
        return Err(PruneError::Dimension(format!(
            "activations have {} columns, weights have {n}",
            b.cols()
        )));
    }
    if let SparsityPattern::SemiStructured { m, .. } = config.pattern {
        if n % m != 0 {
            return Err(PruneError::Dimension(format!(
                "{n} input channels do not split into groups of {m}"
            )));
        }
    }

    let u = &bundle.chol_upper;
    let mut current = w.clone();
    let mut mask = PruneMask::all_kept(rows, n, config.pattern);
    let mut trajectory = Vec::new();
    let mut warnings = Vec::new();

    for (b, range) in block_ranges(n, config.blocksize).into_iter().enumerate() {
        let (i1, i2) = (range.start, range.end);
        let block = current.submatrix(0, rows, i1, i2);
        let inv_diag: Vec<f64> = range.clone().map(|q| u.get(q, q) * u.get(q, q)).collect();
        let dead: Vec<bool> = range.clone().map(|q| bundle.is_dead(q)).collect();
        let block_mask = select_mask_with_dead(&block, &inv_diag, config, &dead);
        mask.write_block(i1, &block_mask);

        let degenerate: Vec<bool> = inv_diag.iter().map(|&d| d < INV_DIAG_UNDERFLOW).collect();
        for (t, &deg) in degenerate.iter().enumerate() {
            if deg && (0..rows).any(|i| !block_mask.is_kept(i, t)) {
                warnings.push(format!(
                    "column {}: inverse-Hessian diagonal below {INV_DIAG_UNDERFLOW:e}, pruned without compensation",
                    i1 + t
                ));
            }
        }

        current
            .data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| {
                let pruned: Vec<bool> = (0..i2 - i1).map(|t| !block_mask.is_kept(i, t)).collect();
                compensate_row(row, i1, i2, &pruned, &degenerate, u, schedule);
            });

        if !current.is_finite() {
            return Err(PruneError::NumericOverflow { block: b });
        }
        trajectory.push(reconstruction_error(w, &current, activations)?.absolute);
    }

    let err = reconstruction_error(w, &current, activations)?;
    Ok(PruneOutcome {
        pruned_weights: current,
        mask,
        block_error_trajectory: trajectory,
        final_error: err.absolute,
        relative_error: err.relative,
        warnings,
    })
}

/// Processes block `[i1, i2)` of a single weight row.
fn compensate_row(
    row: &mut [f64],
    i1: usize,
    i2: usize,
    pruned: &[bool],
    degenerate: &[bool],
    u: &DenseMatrix,
    schedule: CompensationSchedule,
) {
    let n = row.len();
    let reach = match schedule {
        CompensationSchedule::Lazy => i2,
        CompensationSchedule::Eager => n,
    };
    let mut errs = vec![0.0; i2 - i1];
    for t in 0..i2 - i1 {
        if !pruned[t] {
            continue;
        }
        let q = i1 + t;
        if !degenerate[t] {
            let err = row[q] / u.get(q, q);
            let uq = &u.row(q)[q..reach];
            for (w, &h) in row[q..reach].iter_mut().zip(uq) {
                *w -= err * h;
            }
            errs[t] = err;
        }
        row[q] = 0.0;
    }
    if schedule == CompensationSchedule::Lazy && i2 < n {
        for (t, &err) in errs.iter().enumerate() {
            if err == 0.0 {
                continue;
            }
            let uq = &u.row(i1 + t)[i2..];
            for (w, &h) in row[i2..].iter_mut().zip(uq) {
                *w -= err * h;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::accumulate_hessian;

    #[test]
    fn saliency_formula() {
        assert_eq!(obs_saliency(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(obs_saliency(2.0, 0.5).unwrap(), 8.0);
        assert_eq!(obs_saliency(-3.0, 1.0).unwrap(), 9.0);
        assert!(obs_saliency(1.0, 0.0).is_err());
        assert!(obs_saliency(1.0, -1.0).is_err());
    }

    #[test]
    fn update_row_with_identity_hessian() {
        let eye = DenseMatrix::identity(3);
        assert_eq!(
            obs_update_row(&[1.0, 2.0, 3.0], 1, &eye).unwrap(),
            vec![1.0, 0.0, 3.0]
        );
        assert_eq!(
            obs_update_row(&[1.0, 0.0, 3.0], 1, &eye).unwrap(),
            vec![1.0, 0.0, 3.0]
        );
        let bad = DenseMatrix::diag(&[1.0, 0.0, 1.0]);
        assert!(matches!(
            obs_update_row(&[1.0, 2.0, 3.0], 1, &bad),
            Err(PruneError::IndefiniteHessian { pivot: 1 })
        ));
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let w = DenseMatrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let m = select_block_mask(&w, &[1.0, 1.0], &SparsityConfig::unstructured(0.0));
        assert_eq!(m.pruned_count(), 0);
    }

    #[test]
    fn two_four_mask_drops_two_smallest() {
        let w = DenseMatrix::from_rows(&[[1.0, 5.0, 2.0, 4.0]]).unwrap();
        let m = select_block_mask(&w, &[1.0; 4], &SparsityConfig::semi_structured(2, 4));
        assert_eq!(m.kept(), &[false, true, false, true]);
    }

    #[test]
    fn unstructured_ties_prefer_lower_column_then_row() {
        let w = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let m = select_block_mask(&w, &[1.0, 1.0], &SparsityConfig::unstructured(0.25));
        assert_eq!(m.kept(), &[false, true, true, true]);
        let m = select_block_mask(&w, &[1.0, 1.0], &SparsityConfig::unstructured(0.5));
        assert_eq!(m.kept(), &[false, true, false, true]);
    }

    #[test]
    fn dead_columns_go_first() {
        let w = DenseMatrix::from_rows(&[[0.1, 9.0, 0.2]]).unwrap();
        let m = select_mask_with_dead(
            &w,
            &[1.0, 1.0, 1.0],
            &SparsityConfig::unstructured(0.34),
            &[false, true, false],
        );
        assert_eq!(m.kept(), &[true, false, true]);
    }

    #[test]
    fn reconstruction_error_by_hand() {
        let w = DenseMatrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let x = DenseMatrix::identity(2);
        let same = reconstruction_error(&w, &w, &[x.clone()]).unwrap();
        assert_eq!((same.absolute, same.relative), (0.0, 0.0));
        let zero = reconstruction_error(&w, &DenseMatrix::zeros(1, 2), &[x.clone()]).unwrap();
        assert_eq!(zero.relative, 1.0);
        let half = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let e = reconstruction_error(&w, &half, &[x]).unwrap();
        assert_eq!((e.absolute, e.relative), (1.0, 0.5));
        let z = DenseMatrix::zeros(1, 2);
        let e = reconstruction_error(&z, &z, &[DenseMatrix::identity(2)]).unwrap();
        assert_eq!(e.relative, 0.0);
    }

    #[test]
    fn prune_layer_rejects_mismatched_shapes() {
        let x = DenseMatrix::identity(4);
        let bundle = accumulate_hessian(&[x.clone()], 0.01).unwrap();
        let w = DenseMatrix::zeros(2, 3);
        let r = prune_layer(
            &w,
            &bundle,
            &[x.clone()],
            &SparsityConfig::unstructured(0.5),
        );
        assert!(matches!(r, Err(PruneError::Dimension(_))));
        let w = DenseMatrix::zeros(2, 4);
        let r = prune_layer(
            &w,
            &bundle,
            &[DenseMatrix::identity(3)],
            &SparsityConfig::unstructured(0.5),
        );
        assert!(matches!(r, Err(PruneError::Dimension(_))));
    }

    #[test]
    fn nonfinite_weights_are_reported_with_block() {
        let x = DenseMatrix::identity(4);
        let bundle = accumulate_hessian(&[x.clone()], 0.01).unwrap();
        let mut w = DenseMatrix::from_fn(1, 4, |_, j| j as f64 + 1.0);
        w.set(0, 3, f64::INFINITY);
        let cfg = SparsityConfig::unstructured(0.5).with_blocksize(2);
        let r = prune_layer(&w, &bundle, &[x], &cfg);
        assert!(matches!(r, Err(PruneError::NumericOverflow { block: 0 })));
    }

    #[test]
    fn zero_sparsity_layer_is_unchanged() {
        let x = DenseMatrix::from_fn(8, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let bundle = accumulate_hessian(&[x.clone()], 0.01).unwrap();
        let w = DenseMatrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64 * 0.3 - 1.0);
        let out = prune_layer(
            &w,
            &bundle,
            &[x],
            &SparsityConfig::unstructured(0.0).with_blocksize(2),
        )
        .unwrap();
        assert_eq!(out.pruned_weights, w);
        assert_eq!(out.final_error, 0.0);
        assert_eq!(out.block_error_trajectory, vec![0.0, 0.0]);
    }

    #[test]
    fn underflowing_inverse_diagonal_prunes_without_compensation() {
        // Huge, correlated activations drive [H⁻¹]_qq below the underflow cut.
        let x = DenseMatrix::from_rows(&[[1e17, 2e17], [3e17, 1e17], [1e17, 1e17]]).unwrap();
        let bundle = accumulate_hessian(&[x.clone()], 0.0).unwrap();
        let u00 = bundle.chol_upper.get(0, 0);
        assert!(u00 * u00 < INV_DIAG_UNDERFLOW);
        let w = DenseMatrix::from_rows(&[[1.0, 5.0]]).unwrap();
        let cfg = SparsityConfig::semi_structured(1, 2);
        let out = prune_layer(&w, &bundle, &[x], &cfg).unwrap();
        assert_eq!(out.mask.kept(), &[false, true]);
        assert_eq!(out.pruned_weights.data(), &[0.0, 5.0]);
        assert_eq!(out.warnings.len(), 1);
    }
}
