//! Small dense kernels: Cholesky, triangular inversion, and a Gauss-Jordan
//! inverse that shares no code with the Cholesky path.

use crate::error::{PruneError, Result};
use crate::tensor::DenseMatrix;

/// Lower-triangular `L` with `a = L Lᵀ`. Only the lower triangle of `a` is read.
pub fn cholesky_lower(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(PruneError::Dimension(format!(
            "Cholesky needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(PruneError::IndefiniteHessian { pivot: j });
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            let (ri, rj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn invert_lower_triangular(l: &DenseMatrix) -> Result<DenseMatrix> {
    let n = l.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    for c in 0..n {
        // Solve L x = e_c; x is zero above row c.
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l.get(i, k) * inv.get(k, c);
            }
            let d = l.get(i, i);
            if d == 0.0 {
                return Err(PruneError::IndefiniteHessian { pivot: i });
            }
            inv.set(i, c, s / d);
        }
    }
    Ok(inv)
}

/// `A⁻¹` for SPD `A`, via `A = L Lᵀ` and `A⁻¹ = L⁻ᵀ L⁻¹`.
pub fn spd_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let l = cholesky_lower(a)?;
    let li = invert_lower_triangular(&l)?;
    let n = a.rows();
    // (L⁻ᵀ L⁻¹)[i][j] = Σ_k L⁻¹[k][i] L⁻¹[k][j], k >= max(i, j)
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += li.get(k, i) * li.get(k, j);
            }
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}

/// General inverse by Gauss-Jordan elimination with partial pivoting.
/// Returns `None` when a pivot is exactly zero or the result is non-finite.
pub fn gauss_jordan_inverse(a: &DenseMatrix) -> Option<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let w = 2 * n;
    let mut aug = vec![0.0; n * w];
    for i in 0..n {
        aug[i * w..i * w + n].copy_from_slice(a.row(i));
        aug[i * w + n + i] = 1.0;
    }
    for c in 0..n {
        let piv = (c..n).max_by(|&x, &y| aug[x * w + c].abs().total_cmp(&aug[y * w + c].abs()))?;
        if aug[piv * w + c] == 0.0 {
            return None;
        }
        if piv != c {
            for k in 0..w {
                aug.swap(c * w + k, piv * w + k);
            }
        }
        let p = aug[c * w + c];
        for k in 0..w {
            aug[c * w + k] /= p;
        }
        for r in 0..n {
            if r == c {
                continue;
            }
            let f = aug[r * w + c];
            if f == 0.0 {
                continue;
            }
            for k in 0..w {
                aug[r * w + k] -= f * aug[c * w + k];
            }
        }
    }
    let inv = DenseMatrix::from_fn(n, n, |i, j| aug[i * w + n + j]);
    inv.is_finite().then_some(inv)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &DenseMatrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return None;
    }
    let mut m: Vec<f64> = a.data().to_vec();
    let mut x = b.to_vec();
    for c in 0..n {
        let piv = (c..n).max_by(|&p, &q| m[p * n + c].abs().total_cmp(&m[q * n + c].abs()))?;
        if m[piv * n + c] == 0.0 {
            return None;
        }
        if piv != c {
            for k in 0..n {
                m.swap(c * n + k, piv * n + k);
            }
            x.swap(c, piv);
        }
        for r in (c + 1)..n {
            let f = m[r * n + c] / m[c * n + c];
            if f == 0.0 {
                continue;
            }
            for k in c..n {
                m[r * n + k] -= f * m[c * n + k];
            }
            x[r] -= f * x[c];
        }
    }
    for c in (0..n).rev() {
        let mut s = x[c];
        for k in (c + 1)..n {
            s -= m[c * n + k] * x[k];
        }
        x[c] = s / m[c * n + c];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
