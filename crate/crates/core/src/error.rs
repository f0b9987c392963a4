use thiserror::Error;

/// Errors produced by the pruning library.
#[derive(Debug, Error)]
pub enum PruneError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Cholesky factorization (or an inverse-diagonal check) hit a
    /// non-positive pivot.
    #[error("Hessian is not positive definite (pivot {pivot})")]
    IndefiniteHessian { pivot: usize },

    #[error("non-finite value produced while pruning block {block}")]
    NumericOverflow { block: usize },

    #[error("kept-column system is singular in oracle reconstruction")]
    SingularOracle,

    #[error("oracle limited to n <= {cap}, got n = {n}")]
    OracleScale { n: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("tensor format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PruneError>;
