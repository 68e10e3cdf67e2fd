use thiserror::Error;

use crate::cohort::CohortError;
use crate::decision::DecisionError;
use crate::gp::GpError;
use crate::outcome::OutcomeError;
use crate::propagation::PropagationError;
use crate::store::StoreError;
use crate::transition::TransitionError;

/// Umbrella error for pipeline-level operations. Each variant names the module
/// the failure came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cohort: {0}")]
    Cohort(#[from] CohortError),
    #[error("gp: {0}")]
    Gp(#[from] GpError),
    #[error("transition: {0}")]
    Transition(#[from] TransitionError),
    #[error("outcome: {0}")]
    Outcome(#[from] OutcomeError),
    #[error("propagation: {0}")]
    Propagation(#[from] PropagationError),
    #[error("decision: {0}")]
    Decision(#[from] DecisionError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short module tag used in service and CLI error payloads.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Cohort(_) => "cohort-data",
            Error::Gp(_) => "gp-core",
            Error::Transition(_) => "transition",
            Error::Outcome(_) => "outcome-eval",
            Error::Propagation(_) => "propagation",
            Error::Decision(_) => "decision",
            Error::Store(_) => "model-store",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
