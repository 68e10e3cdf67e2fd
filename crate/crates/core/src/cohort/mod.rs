//! Cohort ingestion, validation and preprocessing.
//!
//! Raw CSV files are parsed into [`PatientRecord`]s, truncated at a per-variable
//! empirical quantile, and min-max scaled into `[0, 1]`. The resulting
//! [`ScaledCohort`] carries its [`Scaling`] so that every downstream prediction
//! can be reported back in clinical units.

mod folds;
mod load;
mod preprocess;
mod schema;

pub use folds::{split_folds, split_folds_stratified};
pub use load::{load_cohort, load_cohort_from_readers, OUTCOME_COLUMNS, STATE_ID_COLUMNS};
pub use preprocess::{
    empirical_quantile, inverse_scale, preprocess, scale_unit_interval, truncate_cohort,
    truncate_quantile, Scaling, VariableScaling,
};
pub use schema::{DoseBounds, Variable, VariableSchema};

use thiserror::Error;

use crate::STAGES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("{file}: row {row}, column `{column}`: {message}")]
    Parse {
        file: String,
        row: usize,
        column: String,
        message: String,
    },
    #[error("{file}: unknown column `{column}`")]
    UnknownColumn { file: String, column: String },
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("patient `{patient}`: {message}")]
    Patient { patient: String, message: String },
    #[error("duplicate patient_id `{0}`")]
    DuplicatePatient(String),
    #[error("{0} contains no data rows")]
    Empty(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("variable `{variable}`: {message}")]
    Variable { variable: String, message: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("fold split: {0}")]
    Folds(String),
    #[error("io: {0}")]
    Io(String),
}

/// One patient's staged observations and binary outcomes, in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// `states[t]` holds the q schema variables observed at stage `t + 1`.
    pub states: [Vec<f64>; STAGES],
    /// Dose per fraction (Gy/fraction) delivered at each stage.
    pub doses: [f64; STAGES],
    /// Local control (y1).
    pub lc: bool,
    /// Grade 2+ radiation pneumonitis (y2).
    pub rp2: bool,
}

/// A preprocessed cohort: states truncated and scaled into `[0, 1]`, doses
/// scaled by the configured dose bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledCohort {
    pub patient_ids: Vec<String>,
    /// `states[t][i]` is patient i's scaled state at stage t + 1.
    pub states: [Vec<Vec<f64>>; STAGES],
    /// `doses[t][i]` is patient i's scaled dose at stage t + 1.
    pub doses: [Vec<f64>; STAGES],
    pub lc: Vec<u8>,
    pub rp2: Vec<u8>,
    pub scaling: Scaling,
}

impl ScaledCohort {
    pub fn n(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn q(&self) -> usize {
        self.scaling.variables.len()
    }

    /// Restrict the cohort to the given patient indices, keeping their order.
    pub fn subset(&self, indices: &[usize]) -> ScaledCohort {
        let pick_rows = |rows: &Vec<Vec<f64>>| indices.iter().map(|&i| rows[i].clone()).collect();
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect();
        ScaledCohort {
            patient_ids: indices.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            states: [
                pick_rows(&self.states[0]),
                pick_rows(&self.states[1]),
                pick_rows(&self.states[2]),
            ],
            doses: [
                pick(&self.doses[0]),
                pick(&self.doses[1]),
                pick(&self.doses[2]),
            ],
            lc: indices.iter().map(|&i| self.lc[i]).collect(),
            rp2: indices.iter().map(|&i| self.rp2[i]).collect(),
            scaling: self.scaling.clone(),
        }
    }

    /// Joint `(state, dose)` input of patient `i` at stage index `t`.
    pub fn joint_input(&self, t: usize, i: usize) -> Vec<f64> {
        let mut x = self.states[t][i].clone();
        x.push(self.doses[t][i]);
        x
    }

    /// All observed one-step transitions, patient-major: for patient i, the
    /// transitions out of stages 1..T-1 in order. Returns `(input, next_state)`.
    pub fn transitions(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.n() * (STAGES - 1));
        for i in 0..self.n() {
            for t in 0..STAGES - 1 {
                out.push((self.joint_input(t, i), self.states[t + 1][i].clone()));
            }
        }
        out
    }

    /// Outcome stratum in `0..4` used for stratified fold splits.
    pub fn outcome_strata(&self) -> Vec<usize> {
        self.lc
            .iter()
            .zip(&self.rp2)
            .map(|(&a, &b)| 2 * a as usize + b as usize)
            .collect()
    }
}
