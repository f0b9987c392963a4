//! Dense matrices, column permutations, pruning masks and sparsity settings.
//!
//! Everything here is row-major `f64`. Permutations only ever act on
//! columns (input channels).

use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PruneError::Dimension(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(PruneError::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the sub-matrix `[r0..r1) x [c0..c1)`.
    pub fn submatrix(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        Self::from_fn(r1 - r0, c1 - c0, |i, j| self.get(r0 + i, c0 + j))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(PruneError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Stacks matrices vertically; all must share the column count.
    pub fn vstack(parts: &[DenseMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(PruneError::Dimension(format!(
                    "cannot stack {} columns onto {cols}",
                    m.cols
                )));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(PruneError::Dimension(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

/// A bijection on `[0, size)` together with its inverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &f) in forward.iter().enumerate() {
            if f >= n || inverse[f] != usize::MAX {
                return Err(PruneError::Dimension(format!(
                    "index list is not a permutation of 0..{n}"
                )));
            }
            inverse[f] = i;
        }
        Ok(Self { forward, inverse })
    }

    pub fn identity(n: usize) -> Self {
        let forward: Vec<usize> = (0..n).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    /// Column permutation that moves whole blocks of `blocksize` columns into
    /// `block_order` (a permutation of block indices). The last block may be
    /// narrower than `blocksize`.
    pub fn from_block_order(n: usize, blocksize: usize, block_order: &[usize]) -> Result<Self> {
        let blocks = block_ranges(n, blocksize);
        if block_order.len() != blocks.len() {
            return Err(PruneError::Dimension(format!(
                "block order has {} entries, layer has {} blocks",
                block_order.len(),
                blocks.len()
            )));
        }
        Permutation::new(block_order.to_vec())?;
        let forward = block_order
            .iter()
            .flat_map(|&b| blocks[b].clone())
            .collect();
        Self::new(forward)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// The inverse as a permutation in its own right.
    pub fn inverted(&self) -> Self {
        Self {
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &f)| i == f)
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = PruneError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.forward
    }
}

/// `result[i][j] = m[i][p.forward[j]]`.
pub fn apply_column_permutation(m: &DenseMatrix, p: &Permutation) -> Result<DenseMatrix> {
    if p.len() != m.cols() {
        return Err(PruneError::Dimension(format!(
            "permutation of size {} applied to {} columns",
            p.len(),
            m.cols()
        )));
    }
    let fwd = p.forward();
    Ok(DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| {
        m.get(i, fwd[j])
    }))
}

/// `result.forward[i] = inner.forward[outer.forward[i]]`: permuting by
/// `inner` and then by `outer` is the same as permuting once by the result.
pub fn compose_permutations(outer: &Permutation, inner: &Permutation) -> Result<Permutation> {
    if outer.len() != inner.len() {
        return Err(PruneError::Dimension(format!(
            "cannot compose permutations of sizes {} and {}",
            outer.len(),
            inner.len()
        )));
    }
    Permutation::new(
        outer
            .forward()
            .iter()
            .map(|&o| inner.forward()[o])
            .collect(),
    )
}

/// Column ranges `[start, end)` of consecutive blocks; the last may be short.
pub fn block_ranges(n: usize, blocksize: usize) -> Vec<std::ops::Range<usize>> {
    assert!(blocksize > 0, "blocksize must be positive");
    (0..n)
        .step_by(blocksize)
        .map(|s| s..(s + blocksize).min(n))
        .collect()
}

/// Which sparsity structure a mask follows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsityPattern {
    /// Fraction `sparsity` of each block pruned, anywhere in the block.
    Unstructured { sparsity: f64 },
    /// Exactly `n` of every `m` consecutive entries along a row are kept.
    SemiStructured { n: usize, m: usize },
}

impl SparsityPattern {
    pub fn sparsity(&self) -> f64 {
        match *self {
            SparsityPattern::Unstructured { sparsity } => sparsity,
            SparsityPattern::SemiStructured { n, m } => (m - n) as f64 / m as f64,
        }
    }

    /// Parses `"2:4"` style strings.
    pub fn parse_nm(s: &str) -> Result<Self> {
        let bad = || PruneError::InvalidConfig(format!("expected N:M pattern, got {s:?}"));
        let (n, m) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        let m: usize = m.trim().parse().map_err(|_| bad())?;
        if m == 0 || n == 0 || n > m {
            return Err(PruneError::InvalidConfig(format!(
                "N:M requires 0 < N <= M, got {n}:{m}"
            )));
        }
        Ok(SparsityPattern::SemiStructured { n, m })
    }
}

/// Boolean keep-mask (`true` = weight retained), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    kept: Vec<bool>,
    pattern: SparsityPattern,
}

impl PruneMask {
    pub fn all_kept(rows: usize, cols: usize, pattern: SparsityPattern) -> Self {
        Self {
            rows,
            cols,
            kept: vec![true; rows * cols],
            pattern,
        }
    }

    pub fn from_kept(
        rows: usize,
        cols: usize,
        kept: Vec<bool>,
        pattern: SparsityPattern,
    ) -> Result<Self> {
        if kept.len() != rows * cols {
            return Err(PruneError::Dimension(format!(
                "mask length {} does not match {rows}x{cols}",
                kept.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            kept,
            pattern,
        })
    }

    /// Mask that keeps exactly the nonzero entries of `w`.
    pub fn from_nonzeros(w: &DenseMatrix, pattern: SparsityPattern) -> Self {
        Self {
            rows: w.rows(),
            cols: w.cols(),
            kept: w.data().iter().map(|&v| v != 0.0).collect(),
            pattern,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.pattern
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    #[inline]
    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.kept[i * self.cols + j]
    }

    #[inline]
    pub fn set_kept(&mut self, i: usize, j: usize, keep: bool) {
        self.kept[i * self.cols + j] = keep;
    }

    pub fn pruned_count(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    /// Pruned entries in columns `[c0, c1)`.
    pub fn pruned_in_columns(&self, c0: usize, c1: usize) -> usize {
        (0..self.rows)
            .map(|i| (c0..c1).filter(|&j| !self.is_kept(i, j)).count())
            .sum()
    }

    /// Copies columns `[c0, c1)` of `block` into this mask starting at `c0`.
    pub fn write_block(&mut self, c0: usize, block: &PruneMask) {
        debug_assert_eq!(block.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..block.cols {
                self.set_kept(i, c0 + j, block.is_kept(i, j));
            }
        }
    }

    /// Column-permuted copy, with the same index convention as
    /// [`apply_column_permutation`].
    pub fn permute_columns(&self, p: &Permutation) -> Result<PruneMask> {
        if p.len() != self.cols {
            return Err(PruneError::Dimension(format!(
                "permutation of size {} applied to mask with {} columns",
                p.len(),
                self.cols
            )));
        }
        let fwd = p.forward();
        let mut kept = Vec::with_capacity(self.kept.len());
        for i in 0..self.rows {
            kept.extend(fwd.iter().map(|&f| self.is_kept(i, f)));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            kept,
            pattern: self.pattern,
        })
    }

    /// For N:M masks: every aligned group of `m` entries along each row keeps
    /// exactly `n`. Always true for unstructured masks.
    pub fn satisfies_pattern(&self) -> bool {
        match self.pattern {
            SparsityPattern::Unstructured { .. } => true,
            SparsityPattern::SemiStructured { n, m } => {
                if self.cols % m != 0 {
                    return false;
                }
                (0..self.rows).all(|i| {
                    (0..self.cols)
                        .step_by(m)
                        .all(|g| (g..g + m).filter(|&j| self.is_kept(i, j)).count() == n)
                })
            }
        }
    }
}

/// Fraction of pruned entries.
pub fn mask_sparsity(mask: &PruneMask) -> f64 {
    let total = mask.rows * mask.cols;
    if total == 0 {
        return 0.0;
    }
    mask.pruned_count() as f64 / total as f64
}

/// Number of entries to prune from a group of `elements` at sparsity `p`:
/// `floor(p * elements + 0.5)`.
pub fn prune_count(p: f64, elements: usize) -> usize {
    ((p * elements as f64) + 0.5).floor() as usize
}

pub const DEFAULT_BLOCKSIZE: usize = 128;
pub const DEFAULT_DAMP_FRACTION: f64 = 0.01;
pub const DEFAULT_COLUMNAR_THRESHOLD: f64 = 0.5;

/// Pruning hyper-parameters shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub sparsity: f64,
    pub blocksize: usize,
    pub pattern: SparsityPattern,
    /// Hessian dampening multiplier applied to the mean raw diagonal.
    pub damp_fraction: f64,
    /// Relative-range threshold above which a layer is treated as columnar.
    pub columnar_threshold: f64,
}

impl SparsityConfig {
    pub fn unstructured(sparsity: f64) -> Self {
        Self {
            sparsity,
            blocksize: DEFAULT_BLOCKSIZE,
            pattern: SparsityPattern::Unstructured { sparsity },
            damp_fraction: DEFAULT_DAMP_FRACTION,
            columnar_threshold: DEFAULT_COLUMNAR_THRESHOLD,
        }
    }

    /// N:M config; the blocksize defaults to `m`.
    pub fn semi_structured(n: usize, m: usize) -> Self {
        let pattern = SparsityPattern::SemiStructured { n, m };
        Self {
            sparsity: pattern.sparsity(),
            blocksize: m,
            pattern,
            damp_fraction: DEFAULT_DAMP_FRACTION,
            columnar_threshold: DEFAULT_COLUMNAR_THRESHOLD,
        }
    }

    pub fn with_blocksize(mut self, blocksize: usize) -> Self {
        self.blocksize = blocksize;
        self
    }

    pub fn with_damp(mut self, damp_fraction: f64) -> Self {
        self.damp_fraction = damp_fraction;
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.columnar_threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PruneError::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad(format!("sparsity must be in [0, 1), got {}", self.sparsity));
        }
        if self.blocksize == 0 {
            return bad("blocksize must be at least 1".into());
        }
        if !(self.damp_fraction >= 0.0 && self.damp_fraction.is_finite()) {
            return bad(format!(
                "damp fraction must be >= 0, got {}",
                self.damp_fraction
            ));
        }
        if !(self.columnar_threshold >= 0.0) {
            return bad(format!(
                "columnar threshold must be >= 0, got {}",
                self.columnar_threshold
            ));
        }
        match self.pattern {
            SparsityPattern::Unstructured { sparsity } => {
                if sparsity != self.sparsity {
                    return bad("pattern sparsity disagrees with config sparsity".into());
                }
            }
            SparsityPattern::SemiStructured { n, m } => {
                if m == 0 || n == 0 || n > m {
                    return bad(format!("N:M requires 0 < N <= M, got {n}:{m}"));
                }
                if self.blocksize % m != 0 {
                    return bad(format!(
                        "blocksize {} is not a multiple of M = {m}",
                        self.blocksize
                    ));
                }
                if self.sparsity != self.pattern.sparsity() {
                    return bad(format!(
                        "sparsity {} does not equal (M-N)/M for {n}:{m}",
                        self.sparsity
                    ));
                }
            }
        }
        Ok(())
    }
}
