//! Gaussian-process numerics shared by every model in the crate.

mod gram;
mod hyper;
mod kernel;

pub use gram::{cholesky_lower, gram, log_marginal_likelihood, GramMatrix};
pub use hyper::{fit_hyperparams, grid_search, log_spaced, GridOptimum, GridSpec};
pub use kernel::{se_kernel, SeKernel};
pub(crate) use kernel::kernel_row;

use thiserror::Error;

/// Default diagonal jitter for Gram matrices over scaled inputs.
pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kernel parameters: {0}")]
    InvalidParams(String),
    #[error("Gram matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("shape mismatch: Gram is {n}x{n}, right-hand side has {rows} rows")]
    ShapeMismatch { n: usize, rows: usize },
    #[error("no input points")]
    Empty,
    #[error("hyperparameter search: {0}")]
    Search(String),
}
