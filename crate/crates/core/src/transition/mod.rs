//! Transition function: black-box point predictor plus a per-dimension GP
//! discrepancy over joint `(state, dose)` inputs.

mod metrics;
mod model;
mod predictor;

pub use metrics::{cv_mse, relative_improvement, CvRow, CvTable, RelativeImprovement};
pub use model::{fit_transition, predict_next_state, DimCalibration, StatePrediction, TransitionModel};
pub use predictor::{
    fit_point_predictor, AffinePredictor, BootstrapConfig, ExternalEntry, ExternalPredictions, Mlp,
    MlpConfig, PointPredictor, PredictorConfig,
};

use thiserror::Error;

use crate::cohort::CohortError;
use crate::gp::GpError;

/// Scaled inputs outside `[-INPUT_SLACK, 1 + INPUT_SLACK]` are rejected as
/// probable unit mistakes.
pub const INPUT_SLACK: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransitionError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("input {index} = {value} is outside the scaled range; was it given in original units?")]
    OutOfRange { index: usize, value: f64 },
    #[error("expected input of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("external predictions have no entry for this input")]
    NoExternalPrediction,
    #[error("external predictions: {0}")]
    External(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("arrays are not aligned: {0}")]
    Misaligned(String),
}
