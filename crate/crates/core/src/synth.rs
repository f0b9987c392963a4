//! Seeded generators for weight matrices and calibration activations.
//!
//! Randomness comes from SplitMix64 (Steele, Lea & Flood; increment
//! `0x9E3779B97F4A7C15`, finaliser multipliers `0xBF58476D1CE4E5B9` and
//! `0x94D049BB133111EB`). Uniforms take the top 53 bits:
//! `u = (x >> 11) · 2⁻⁵³`. Normals use one Box-Muller cosine branch per pair
//! of uniforms, `z = sqrt(-2 ln(1 - u1)) · cos(2π u2)`. All matrices are
//! filled row-major. Together this pins every generated value, so other
//! implementations can reproduce them exactly.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{PruneError, Result};
use crate::tensor::{block_ranges, DenseMatrix};

/// Seed offset separating the activation stream from the weight stream of a
/// fixture.
pub const ACTIVATION_SEED_OFFSET: u64 = 0x5EED_0000_0000_0001;

/// Standard-normal stream on top of SplitMix64.
pub struct NormalStream {
    rng: SplitMix64,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// iid standard normal weights.
pub fn gen_uniform(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut s = NormalStream::new(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| s.next_normal())
}

/// Extra structure for [`gen_columnar_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnarOptions {
    /// Block `k` of `K` is additionally scaled by `1 + ramp · k / (K - 1)`.
    pub ramp: f64,
    /// Per-column log-normal gain spread: column `j` is scaled by
    /// `exp(column_spread · z_j)`.
    pub column_spread: f64,
}

impl Default for ColumnarOptions {
    fn default() -> Self {
        Self {
            ramp: 0.0,
            column_spread: 0.0,
        }
    }
}

/// Normal weights with the columns of one block amplified by `hot_gain`.
pub fn gen_columnar(
    rows: usize,
    cols: usize,
    blocksize: usize,
    hot_block_index: usize,
    hot_gain: f64,
    seed: u64,
) -> Result<DenseMatrix> {
    gen_columnar_with(
        rows,
        cols,
        blocksize,
        hot_block_index,
        hot_gain,
        seed,
        &ColumnarOptions::default(),
    )
}

pub fn gen_columnar_with(
    rows: usize,
    cols: usize,
    blocksize: usize,
    hot_block_index: usize,
    hot_gain: f64,
    seed: u64,
    opts: &ColumnarOptions,
) -> Result<DenseMatrix> {
    if blocksize == 0 {
        return Err(PruneError::InvalidConfig(
            "blocksize must be at least 1".into(),
        ));
    }
    let blocks = block_ranges(cols, blocksize);
    if hot_block_index >= blocks.len() {
        return Err(PruneError::InvalidConfig(format!(
            "hot block {hot_block_index} out of range for {} blocks",
            blocks.len()
        )));
    }
    if !(hot_gain > 0.0) {
        return Err(PruneError::InvalidConfig(format!(
            "hot gain must be positive, got {hot_gain}"
        )));
    }
    let mut s = NormalStream::new(seed);
    let mut w = DenseMatrix::from_fn(rows, cols, |_, _| s.next_normal());

    let k = blocks.len();
    let mut gain = vec![1.0; cols];
    for (b, range) in blocks.iter().enumerate() {
        let ramp = if k > 1 {
            1.0 + opts.ramp * b as f64 / (k - 1) as f64
        } else {
            1.0
        };
        let hot = if b == hot_block_index { hot_gain } else { 1.0 };
        for j in range.clone() {
            gain[j] = ramp * hot;
        }
    }
    if opts.column_spread != 0.0 {
        for g in gain.iter_mut() {
            *g *= (opts.column_spread * s.next_normal()).exp();
        }
    }
    for i in 0..rows {
        for (v, g) in w.row_mut(i).iter_mut().zip(&gain) {
            *v *= g;
        }
    }
    Ok(w)
}

/// Activation rows with covariance `(1 - c) I + c · 11ᵀ`: each row is
/// `sqrt(1 - c) z + sqrt(c) g 1` with a shared factor `g` per row.
pub fn gen_activations(
    samples: usize,
    cols: usize,
    correlation: f64,
    seed: u64,
) -> Result<DenseMatrix> {
    if !(0.0..1.0).contains(&correlation) {
        return Err(PruneError::InvalidConfig(format!(
            "correlation must be in [0, 1), got {correlation}"
        )));
    }
    let mut s = NormalStream::new(seed);
    let (a, c) = ((1.0 - correlation).sqrt(), correlation.sqrt());
    let mut data = Vec::with_capacity(samples * cols);
    for _ in 0..samples {
        let g = s.next_normal();
        for _ in 0..cols {
            data.push(a * s.next_normal() + c * g);
        }
    }
    DenseMatrix::new(samples, cols, data)
}

/// Shape of a synthetic layer plus its calibration set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub rows: usize,
    pub cols: usize,
    /// Width of the amplified column block.
    pub blocksize: usize,
    /// `None` picks the last block.
    pub hot_block_index: Option<usize>,
    pub hot_gain: f64,
    pub options: ColumnarOptions,
    pub samples: usize,
    pub correlation: f64,
}

impl FixtureSpec {
    /// 64x256 columnar layer: the last 64 columns carry gain 10 and every
    /// column gets a mild log-normal spread. Pruned with blocksize 128 the
    /// hot columns sit at the back of the second block.
    pub fn columnar() -> Self {
        Self {
            rows: 64,
            cols: 256,
            blocksize: 64,
            hot_block_index: None,
            hot_gain: 10.0,
            options: ColumnarOptions {
                ramp: 0.0,
                column_spread: 0.5,
            },
            samples: 384,
            correlation: 0.5,
        }
    }

    /// 64x256 layer split into eight 32-wide blocks, the last one hot and no
    /// extra spread. Used for block position sweeps.
    pub fn position_sweep() -> Self {
        Self {
            blocksize: 32,
            options: ColumnarOptions::default(),
            ..Self::columnar()
        }
    }

    /// Same layer size with no hot block.
    pub fn uniform() -> Self {
        Self {
            hot_gain: 1.0,
            options: ColumnarOptions::default(),
            ..Self::columnar()
        }
    }

    pub fn hot_block(&self) -> usize {
        self.hot_block_index
            .unwrap_or_else(|| block_ranges(self.cols, self.blocksize).len() - 1)
    }

    /// Weights and one calibration batch for `seed`.
    pub fn generate(&self, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
        let w = if self.hot_gain == 1.0 && self.options == ColumnarOptions::default() {
            gen_uniform(self.rows, self.cols, seed)
        } else {
            gen_columnar_with(
                self.rows,
                self.cols,
                self.blocksize,
                self.hot_block(),
                self.hot_gain,
                seed,
                &self.options,
            )?
        };
        let x = gen_activations(
            self.samples,
            self.cols,
            self.correlation,
            seed.wrapping_add(ACTIVATION_SEED_OFFSET),
        )?;
        Ok((w, x))
    }
}
