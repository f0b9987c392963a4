//! Brute-force references for the pruning engine.
//!
//! These avoid the Cholesky machinery entirely: the masked least-squares
//! optimum is solved by Gaussian elimination, and the sequential OBS stepper
//! inverts every trailing Hessian block directly. Both are O(n⁴)-ish and
//! meant for small layers only.

use serde::Serialize;

use crate::calibration::{accumulate_hessian, cholesky_inverse_identity_check};
use crate::error::{PruneError, Result};
use crate::linalg::{gauss_jordan_inverse, solve};
use crate::obs::{
    obs_update_row, prune_layer, reconstruction_error, select_mask_with_dead, PruneOutcome,
    INV_DIAG_UNDERFLOW,
};
use crate::report::VerifySummary;
use crate::tensor::{
    apply_column_permutation, block_ranges, DenseMatrix, Permutation, PruneMask, SparsityConfig,
    SparsityPattern,
};

/// Largest layer width the naive stepper accepts.
pub const ORACLE_MAX_N: usize = 64;

/// Allowed relative gap between engine and oracle final errors.
pub const VERIFY_REL_TOL: f64 = 1e-6;

/// The row `ŵ` minimising `(w - ŵ) H (w - ŵ)ᵀ` subject to `ŵ_j = 0` wherever
/// `kept[j]` is false.
pub fn exact_masked_reconstruction(
    w_row: &[f64],
    kept: &[bool],
    hessian: &DenseMatrix,
) -> Result<Vec<f64>> {
    let n = w_row.len();
    if kept.len() != n || hessian.shape() != (n, n) {
        return Err(PruneError::Dimension(format!(
            "row {n}, mask {}, Hessian {:?}",
            kept.len(),
            hessian.shape()
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&j| kept[j]).collect();
    let mut out = vec![0.0; n];
    if idx.is_empty() {
        return Ok(out);
    }
    // H_KK ŵ_K = (H w)_K
    let h_kk = DenseMatrix::from_fn(idx.len(), idx.len(), |a, b| hessian.get(idx[a], idx[b]));
    let rhs: Vec<f64> = idx
        .iter()
        .map(|&k| (0..n).map(|j| hessian.get(k, j) * w_row[j]).sum())
        .collect();
    let sol = solve(&h_kk, &rhs).ok_or(PruneError::SingularOracle)?;
    for (&k, v) in idx.iter().zip(sol) {
        out[k] = v;
    }
    Ok(out)
}

/// `(w - ŵ) H (w - ŵ)ᵀ`.
pub fn quadratic_error(w: &[f64], w_hat: &[f64], hessian: &DenseMatrix) -> f64 {
    let d: Vec<f64> = w.iter().zip(w_hat).map(|(a, b)| a - b).collect();
    (0..d.len())
        .map(|i| d[i] * (0..d.len()).map(|j| hessian.get(i, j) * d[j]).sum::<f64>())
        .sum()
}

/// Sequential OBS with the same block-wise mask rule as the engine, but
/// re-deriving `[H_{q:,q:}]⁻¹` by direct inversion for every column.
pub fn naive_obs_prune(
    w: &DenseMatrix,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
) -> Result<PruneOutcome> {
    config.validate()?;
    let (rows, n) = w.shape();
    if n > ORACLE_MAX_N {
        return Err(PruneError::OracleScale {
            n,
            cap: ORACLE_MAX_N,
        });
    }
    if activations.is_empty() {
        return Err(PruneError::InvalidConfig(
            "at least one activation batch is required".into(),
        ));
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

    let mut gram = DenseMatrix::zeros(n, n);
    for b in activations {
        for r in 0..b.rows() {
            let x = b.row(r);
            for j in 0..n {
                for k in 0..n {
                    gram.set(j, k, gram.get(j, k) + x[j] * x[k]);
                }
            }
        }
    }
    let lambda =
        config.damp_fraction * (0..n).map(|j| gram.get(j, j)).sum::<f64>() / n.max(1) as f64;
    let mut h = gram.clone();
    for j in 0..n {
        h.set(j, j, gram.get(j, j) + lambda);
    }
    let dead: Vec<bool> = (0..n).map(|j| gram.get(j, j) == 0.0).collect();

    // First column of [H_{q:,q:}]⁻¹ for every q.
    let mut trailing_cols = Vec::with_capacity(n);
    for q in 0..n {
        let inv = gauss_jordan_inverse(&h.submatrix(q, n, q, n))
            .ok_or(PruneError::IndefiniteHessian { pivot: q })?;
        if !(inv.get(0, 0) > 0.0) {
            return Err(PruneError::IndefiniteHessian { pivot: q });
        }
        trailing_cols.push(inv.column(0));
    }

    let mut current = w.clone();
    let mut mask = PruneMask::all_kept(rows, n, config.pattern);
    let mut trajectory = Vec::new();
    let mut warnings = Vec::new();
    for (b, range) in block_ranges(n, config.blocksize).into_iter().enumerate() {
        let block = current.submatrix(0, rows, range.start, range.end);
        let inv_diag: Vec<f64> = range.clone().map(|q| trailing_cols[q][0]).collect();
        let block_mask = select_mask_with_dead(&block, &inv_diag, config, &dead[range.clone()]);
        mask.write_block(range.start, &block_mask);
        for q in range.clone() {
            let col = &trailing_cols[q];
            let degenerate = col[0] < INV_DIAG_UNDERFLOW;
            for i in 0..rows {
                if block_mask.is_kept(i, q - range.start) {
                    continue;
                }
                if degenerate {
                    warnings.push(format!("column {q}: pruned without compensation"));
                } else {
                    let scale = current.get(i, q) / col[0];
                    for (k, &c) in col.iter().enumerate() {
                        let j = q + k;
                        current.set(i, j, current.get(i, j) - scale * c);
                    }
                }
                current.set(i, q, 0.0);
            }
        }
        if !current.is_finite() {
            return Err(PruneError::NumericOverflow { block: b });
        }
        trajectory.push(reconstruction_error(w, &current, activations)?.absolute);
    }
    warnings.dedup();
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

/// Runs the engine and [`naive_obs_prune`] on the same layer, optionally with
/// its columns visited in `order`, and compares masks and final errors.
pub fn cross_check(
    w: &DenseMatrix,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
    order: Option<&Permutation>,
) -> Result<VerifySummary> {
    let (w, acts) = match order {
        Some(p) => (
            apply_column_permutation(w, p)?,
            activations
                .iter()
                .map(|x| apply_column_permutation(x, p))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => (w.clone(), activations.to_vec()),
    };
    let naive = naive_obs_prune(&w, &acts, config)?;
    let bundle = accumulate_hessian(&acts, config.damp_fraction)?;
    let engine = prune_layer(&w, &bundle, &acts, config)?;
    let masks_equal = engine.mask == naive.mask;
    let scale = naive.final_error.abs().max(f64::MIN_POSITIVE);
    let diff = (engine.final_error - naive.final_error).abs();
    let final_error_rel_diff = if diff == 0.0 { 0.0 } else { diff / scale };
    Ok(VerifySummary {
        passed: masks_equal && final_error_rel_diff <= VERIFY_REL_TOL,
        masks_equal,
        final_error_rel_diff,
    })
}

/// One line of [`run_oracle_suite`].
#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    /// Largest observed deviation (or relative error gap).
    pub deviation: f64,
}

/// Seeded engine-versus-oracle checks on small random layers: the trailing
/// inverse identity at every index, single-weight OBS updates against the
/// masked least-squares optimum, and full pruning runs against the naive
/// stepper (unstructured and 2:4).
pub fn run_oracle_suite(seed: u64, cases: usize) -> Result<Vec<OracleCheck>> {
    const WIDTHS: [usize; 4] = [8, 16, 32, 64];
    let mut out = Vec::new();
    for case in 0..cases {
        let n = WIDTHS[case % WIDTHS.len()];
        let s = seed.wrapping_mul(0x9E37_79B9).wrapping_add(case as u64);
        let w = crate::synth::gen_uniform(8, n, s);
        let x =
            crate::synth::gen_activations(2 * n, n, 0.3, s ^ crate::synth::ACTIVATION_SEED_OFFSET)?
                .scale(1.0 / ((2 * n) as f64).sqrt());
        let acts = [x];

        let bundle = accumulate_hessian(&acts, crate::tensor::DEFAULT_DAMP_FRACTION)?;
        let mut dev: f64 = 0.0;
        for i in 0..n {
            dev = dev.max(cholesky_inverse_identity_check(&bundle, i)?);
        }
        out.push(OracleCheck {
            name: format!("case {case}: trailing inverse identity (n={n})"),
            passed: dev <= 1e-7,
            deviation: dev,
        });

        let q = (s as usize) % n;
        let row = w.row(0);
        let fast = obs_update_row(row, q, &bundle.inv_hessian)?;
        let kept: Vec<bool> = (0..n).map(|j| j != q).collect();
        let exact = exact_masked_reconstruction(row, &kept, &bundle.hessian)?;
        let dev = fast
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.push(OracleCheck {
            name: format!("case {case}: single-weight update vs exact optimum (n={n}, q={q})"),
            passed: dev <= 1e-8,
            deviation: dev,
        });

        let bs = (n / 4).max(4);
        let mut configs: Vec<SparsityConfig> = [0.25, 0.5, 0.75]
            .iter()
            .map(|&p| SparsityConfig::unstructured(p).with_blocksize(bs))
            .collect();
        configs.push(SparsityConfig::semi_structured(2, 4).with_blocksize(bs));
        for cfg in configs {
            let v = cross_check(&w, &acts, &cfg, None)?;
            let label = match cfg.pattern {
                SparsityPattern::Unstructured { sparsity } => format!("p={sparsity}"),
                SparsityPattern::SemiStructured { n: a, m } => format!("{a}:{m}"),
            };
            out.push(OracleCheck {
                name: format!("case {case}: engine vs naive stepper (n={n}, {label})"),
                passed: v.passed,
                deviation: v.final_error_rel_diff,
            });
        }
    }
    Ok(out)
}
