//! Synthetic cohorts with a known ground truth, for the acceptance studies
//! and for trying the pipeline without clinical data.

use dosegp_core::cohort::VariableSchema;
use dosegp_core::config::RunConfig;
use dosegp_core::synth::{records_to_csv, StudyPatient, SyntheticTruth};
use dosegp_core::transition::PredictorConfig;

pub const TRAIN_STATES: &str = "train_states.csv";
pub const TRAIN_OUTCOMES: &str = "train_outcomes.csv";
pub const STUDY_STATES: &str = "study_states.csv";
pub const STUDY_OUTCOMES: &str = "study_outcomes.csv";
pub const STUDY_TRUTH: &str = "study_truth.csv";
pub const CONFIG: &str = "config.json";

/// Offset between the training-cohort seed and the decision-study seed.
pub const STUDY_SEED_OFFSET: u64 = 100;

/// Run config for the synthetic cohorts. The point predictor is ridge-linear,
/// so it can only learn the affine part of the true transition. Variables
/// are not truncated: the dose-driven tumor and lung values would otherwise
/// be clipped.
pub fn study_config(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        states: Some(TRAIN_STATES.into()),
        outcomes: Some(TRAIN_OUTCOMES.into()),
        predictor: PredictorConfig::Linear { ridge: 1e-6 },
        cross_validate: false,
        schema: VariableSchema {
            truncation_quantile: 1.0,
            ..VariableSchema::default()
        },
        ..RunConfig::default()
    };
    c.set_seed(seed);
    c
}

pub struct Simulation {
    pub train_states: String,
    pub train_outcomes: String,
    pub study: Vec<StudyPatient>,
    pub study_states: String,
    pub study_outcomes: String,
}

pub fn simulate(n_train: usize, n_study: usize, seed: u64) -> Simulation {
    let truth = SyntheticTruth::default();
    let schema = VariableSchema::default();
    let (train_states, train_outcomes) = records_to_csv(&truth.generate_records(n_train, seed, "t"), &schema);
    let study = truth.generate_study(n_study, seed + STUDY_SEED_OFFSET, "d");
    let records: Vec<_> = study.iter().map(|s| s.record.clone()).collect();
    let (study_states, study_outcomes) = records_to_csv(&records, &schema);
    Simulation {
        train_states,
        train_outcomes,
        study,
        study_states,
        study_outcomes,
    }
}
