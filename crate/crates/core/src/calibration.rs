//! Hessian and activation statistics built from calibration activations.
//!
//! Activations are stored as `samples x n` matrices (one row per token), so
//! the layer Hessian is the column Gram matrix `H[j][k] = Σ_r X[r][j] X[r][k]`.

use rayon::prelude::*;

use crate::error::{PruneError, Result};
use crate::linalg::{cholesky_lower, gauss_jordan_inverse, spd_inverse};
use crate::tensor::{DenseMatrix, Permutation};

/// Rows per partial Gram sum. Fixed so the reduction order does not depend
/// on the number of worker threads.
const GRAM_CHUNK_ROWS: usize = 256;

/// Dampened Hessian of one layer with its inverse and the upper Cholesky
/// factor of the inverse.
#[derive(Debug, Clone)]
pub struct HessianBundle {
    pub n: usize,
    /// Undampened `XᵀX`.
    pub gram: DenseMatrix,
    /// `XᵀX + λI`.
    pub hessian: DenseMatrix,
    pub inv_hessian: DenseMatrix,
    /// Upper factor `Lᵀ` with `H⁻¹ = L Lᵀ`, `L` lower triangular.
    pub chol_upper: DenseMatrix,
    pub damp_lambda: f64,
    /// Columns whose raw diagonal is exactly zero.
    pub dead_columns: Vec<usize>,
}

impl HessianBundle {
    /// Dampens a raw Gram matrix with `λ = damp_fraction * mean(diag)` and
    /// factors it.
    pub fn from_gram(gram: DenseMatrix, damp_fraction: f64) -> Result<Self> {
        let n = gram.rows();
        if gram.cols() != n {
            return Err(PruneError::Dimension(format!(
                "Gram matrix must be square, got {}x{}",
                gram.rows(),
                gram.cols()
            )));
        }
        let diag = gram.diagonal();
        let mean = if n == 0 {
            0.0
        } else {
            diag.iter().sum::<f64>() / n as f64
        };
        let lambda = damp_fraction * mean;
        Self::with_lambda(gram, lambda)
    }

    /// Bundle for an already-formed SPD matrix, no dampening.
    pub fn from_hessian(hessian: DenseMatrix) -> Result<Self> {
        Self::with_lambda(hessian, 0.0)
    }

    fn with_lambda(gram: DenseMatrix, lambda: f64) -> Result<Self> {
        let n = gram.rows();
        let dead_columns = (0..n).filter(|&j| gram.get(j, j) == 0.0).collect();
        let mut hessian = gram.clone();
        for j in 0..n {
            hessian.set(j, j, gram.get(j, j) + lambda);
        }
        let inv_hessian = spd_inverse(&hessian)?;
        let chol_upper = cholesky_lower(&inv_hessian)?.transpose();
        Ok(Self {
            n,
            gram,
            hessian,
            inv_hessian,
            chol_upper,
            damp_lambda: lambda,
            dead_columns,
        })
    }

    /// The bundle for column-permuted activations: the Gram matrix is
    /// relabelled symmetrically, the same `λ` is kept, and everything is
    /// refactored in the new order.
    pub fn permuted(&self, p: &Permutation) -> Result<Self> {
        if p.len() != self.n {
            return Err(PruneError::Dimension(format!(
                "permutation of size {} applied to Hessian of size {}",
                p.len(),
                self.n
            )));
        }
        let f = p.forward();
        let gram = DenseMatrix::from_fn(self.n, self.n, |i, j| self.gram.get(f[i], f[j]));
        Self::with_lambda(gram, self.damp_lambda)
    }

    /// Lower factor `L` (`H⁻¹ = L Lᵀ`).
    pub fn chol_lower(&self) -> DenseMatrix {
        self.chol_upper.transpose()
    }

    pub fn is_dead(&self, j: usize) -> bool {
        self.dead_columns.binary_search(&j).is_ok()
    }
}

fn check_batches(batches: &[DenseMatrix]) -> Result<usize> {
    let first = batches.first().ok_or_else(|| {
        PruneError::InvalidConfig("at least one activation batch is required".into())
    })?;
    let n = first.cols();
    if let Some(b) = batches.iter().find(|b| b.cols() != n) {
        return Err(PruneError::Dimension(format!(
            "activation batch has {} columns, expected {n}",
            b.cols()
        )));
    }
    Ok(n)
}

/// Raw Gram matrix `Σ_batches XᵀX`.
pub fn accumulate_gram(batches: &[DenseMatrix]) -> Result<DenseMatrix> {
    let n = check_batches(batches)?;
    let chunks: Vec<(&DenseMatrix, usize, usize)> = batches
        .iter()
        .flat_map(|b| {
            (0..b.rows())
                .step_by(GRAM_CHUNK_ROWS)
                .map(move |r| (b, r, (r + GRAM_CHUNK_ROWS).min(b.rows())))
        })
        .collect();
    let partials: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&(b, r0, r1)| {
            let mut upper = vec![0.0; n * n];
            for r in r0..r1 {
                let x = b.row(r);
                for (j, &xj) in x.iter().enumerate() {
                    if xj == 0.0 {
                        continue;
                    }
                    let out = &mut upper[j * n + j..(j + 1) * n];
                    for (o, &xk) in out.iter_mut().zip(&x[j..]) {
                        *o += xj * xk;
                    }
                }
            }
            upper
        })
        .collect();
    let mut total = vec![0.0; n * n];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        if i <= j {
            total[i * n + j]
        } else {
            total[j * n + i]
        }
    }))
}

/// Builds the dampened Hessian bundle from calibration batches.
pub fn accumulate_hessian(batches: &[DenseMatrix], damp_fraction: f64) -> Result<HessianBundle> {
    if !(damp_fraction >= 0.0) {
        return Err(PruneError::InvalidConfig(format!(
            "damp fraction must be >= 0, got {damp_fraction}"
        )));
    }
    HessianBundle::from_gram(accumulate_gram(batches)?, damp_fraction)
}

/// Per-column ℓ2 norms of the calibration activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationNorms {
    pub norms: Vec<f64>,
}

impl ActivationNorms {
    pub fn new(norms: Vec<f64>) -> Self {
        Self { norms }
    }

    pub fn n(&self) -> usize {
        self.norms.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.norms.iter().map(|v| v * s).collect())
    }

    pub fn permuted(&self, p: &Permutation) -> Self {
        Self::new(p.forward().iter().map(|&f| self.norms[f]).collect())
    }
}

pub fn column_norms(batches: &[DenseMatrix]) -> Result<ActivationNorms> {
    let n = check_batches(batches)?;
    let mut sq = vec![0.0; n];
    for b in batches {
        for r in 0..b.rows() {
            for (s, x) in sq.iter_mut().zip(b.row(r)) {
                *s += x * x;
            }
        }
    }
    Ok(ActivationNorms::new(
        sq.into_iter().map(f64::sqrt).collect(),
    ))
}

/// Max-abs gap between `inverse(H[i:, i:])`, computed directly, and
/// `L[i:, i:] · L[i:, i:]ᵀ` taken from the stored factor.
pub fn cholesky_inverse_identity_check(bundle: &HessianBundle, i: usize) -> Result<f64> {
    let n = bundle.n;
    if i >= n {
        return Err(PruneError::Dimension(format!(
            "trailing index {i} out of range for n = {n}"
        )));
    }
    let trailing = bundle.hessian.submatrix(i, n, i, n);
    let direct =
        gauss_jordan_inverse(&trailing).ok_or(PruneError::IndefiniteHessian { pivot: i })?;
    // L[i:, i:] = (U[i:, i:])ᵀ, so L Lᵀ = Uᵀ U on the trailing block.
    let m = n - i;
    let u = &bundle.chol_upper;
    let from_factor = DenseMatrix::from_fn(m, m, |a, b| {
        let (ra, rb) = (i + a, i + b);
        (i..=ra.min(rb)).map(|k| u.get(k, ra) * u.get(k, rb)).sum()
    });
    Ok(direct.max_abs_diff(&from_factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_activations() {
        let b = accumulate_hessian(&[DenseMatrix::identity(2)], 0.0).unwrap();
        let eye = DenseMatrix::identity(2);
        assert_eq!(b.hessian, eye);
        assert_eq!(b.inv_hessian, eye);
        assert_eq!(b.chol_upper, eye);
        assert_eq!(b.damp_lambda, 0.0);
    }

    #[test]
    fn diagonal_activations() {
        let b = accumulate_hessian(&[m(&[&[2.0, 0.0], &[0.0, 1.0]])], 0.0).unwrap();
        assert_eq!(b.hessian, DenseMatrix::diag(&[4.0, 1.0]));
        assert_eq!(b.inv_hessian, DenseMatrix::diag(&[0.25, 1.0]));
        assert_eq!(b.chol_upper, DenseMatrix::diag(&[0.5, 1.0]));
    }

    #[test]
    fn dampening_uses_mean_diagonal() {
        let b = accumulate_hessian(&[m(&[&[2.0, 0.0], &[0.0, 1.0]])], 0.1).unwrap();
        assert!((b.damp_lambda - 0.25).abs() < 1e-15);
        assert_eq!(b.hessian.get(0, 0), 4.25);
        assert_eq!(b.gram.get(0, 0), 4.0);
    }

    #[test]
    fn dead_columns_are_recorded_and_dampened() {
        let x = m(&[&[1.0, 0.0, 2.0], &[3.0, 0.0, 1.0]]);
        let b = accumulate_hessian(&[x.clone()], 0.01).unwrap();
        assert_eq!(b.dead_columns, vec![1]);
        assert!(b.is_dead(1) && !b.is_dead(0));
        assert!(matches!(
            accumulate_hessian(&[x], 0.0),
            Err(PruneError::IndefiniteHessian { .. })
        ));
    }

    #[test]
    fn rejects_empty_and_ragged_batches() {
        assert!(accumulate_hessian(&[], 0.01).is_err());
        let r = accumulate_hessian(&[DenseMatrix::zeros(2, 3), DenseMatrix::zeros(2, 4)], 0.01);
        assert!(matches!(r, Err(PruneError::Dimension(_))));
    }

    #[test]
    fn norms_of_simple_columns() {
        let n = column_norms(&[m(&[&[3.0, 0.0], &[4.0, 0.0]])]).unwrap();
        assert_eq!(n.norms, vec![5.0, 0.0]);
        let n = column_norms(&[DenseMatrix::identity(3)]).unwrap();
        assert_eq!(n.norms, vec![1.0; 3]);
    }

    #[test]
    fn identity_check_on_diagonal_hessian() {
        let b = HessianBundle::from_hessian(DenseMatrix::diag(&[4.0, 1.0])).unwrap();
        assert_eq!(cholesky_inverse_identity_check(&b, 1).unwrap(), 0.0);
        assert!(cholesky_inverse_identity_check(&b, 0).unwrap() <= 1e-8);
        assert!(cholesky_inverse_identity_check(&b, 2).is_err());
    }

    #[test]
    fn permuted_bundle_matches_permuted_activations() {
        let x = m(&[
            &[1.0, 2.0, 0.5],
            &[0.3, -1.0, 2.0],
            &[2.0, 0.1, -0.7],
            &[-0.4, 0.9, 1.1],
        ]);
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let base = accumulate_hessian(&[x.clone()], 0.01).unwrap();
        let xp = crate::tensor::apply_column_permutation(&x, &p).unwrap();
        let direct = accumulate_hessian(&[xp], 0.01).unwrap();
        let relabelled = base.permuted(&p).unwrap();
        assert_eq!(relabelled.gram, direct.gram);
        assert!(relabelled.chol_upper.max_abs_diff(&direct.chol_upper) < 1e-12);
    }
}
