//! One-shot layer-wise weight pruning with second-order (OBS) compensation
//! and loss-ordered column reordering for layers whose weights cluster by
//! input channel.
//!
//! The pieces, bottom-up:
//! - [`tensor`]: dense matrices, permutations, masks, sparsity settings
//! - [`calibration`]: Hessian bundle and activation norms from calibration data
//! - [`obs`]: the blocked OBS pruning engine
//! - [`rose`]: loss estimation, two-level reorder, columnar detection
//! - [`baselines`]: magnitude and Wanda pruning
//! - [`oracle`]: brute-force references for the engine
//! - [`synth`]: seeded weight/activation generators

pub mod baselines;
pub mod calibration;
pub mod error;
pub mod linalg;
pub mod method;
pub mod obs;
pub mod oracle;
pub mod report;
pub mod rose;
pub mod rtns;
pub mod synth;
pub mod tensor;

pub use calibration::{accumulate_hessian, column_norms, ActivationNorms, HessianBundle};
pub use error::{PruneError, Result};
pub use method::{run_method, Method, MethodRun};
pub use obs::{prune_layer, reconstruction_error, PruneOutcome};
pub use rose::{rose_prune_layer, LossProfile, ReorderPlan};
pub use tensor::{DenseMatrix, Permutation, PruneMask, SparsityConfig, SparsityPattern};
