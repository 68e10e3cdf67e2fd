//! Dose decision support for staged radiotherapy.
//!
//! The pipeline has three learned pieces:
//!
//! * a **transition model** that predicts the next-stage patient state from the
//!   current state and dose, built as a black-box point predictor plus a
//!   Gaussian-process discrepancy term per state variable,
//! * an **evaluation model** of two GP classifiers (local control and
//!   grade-2+ pneumonitis) fitted with the Laplace approximation,
//! * a **compensation model**, a GP regression of the gap between the
//!   optimised dose and the physician's prescription.
//!
//! Transition uncertainty is pushed through the classifiers with an
//! error-in-variables kernel and the delta method, and the resulting outcome
//! probabilities are turned into Monte-Carlo reward samples that drive a
//! one-sided Welch test between the physician's dose and the optimised dose.

pub mod cohort;
pub mod config;
pub mod decision;
pub mod gp;
pub mod outcome;
pub mod pipeline;
pub mod propagation;
pub mod store;
pub mod synth;
pub mod transition;

mod error;

pub use error::{Error, Result};

/// Number of treatment stages in the escalation protocol.
pub const STAGES: usize = 3;
