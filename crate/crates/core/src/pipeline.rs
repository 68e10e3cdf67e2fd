//! End-to-end training and inference over a scaled cohort.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{split_folds_stratified, PatientRecord, ScaledCohort, Scaling, VariableSchema};
use crate::config::RunConfig;
use crate::decision::{
    compare_prescriptions, compensation_map, fit_compensation, CompensationCase, CompensationMap, CompensationModel,
    DecisionError, DecisionVerdict, OutcomeModel,
};
use crate::gp::SeKernel;
use crate::outcome::{predict_logit, sigmoid, ClassifierDiagnostics, EvaluationModel, Outcome};
use crate::propagation::{outcome_distribution, sample_reward, OutcomeDistribution};
use crate::transition::{cv_mse, fit_point_predictor, fit_transition, predict_next_state, CvTable, TransitionModel};
use crate::{Error, Result, STAGES};

/// A trained transition + evaluation (+ optional compensation) pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPipeline {
    pub schema: VariableSchema,
    pub scaling: Scaling,
    pub transition: TransitionModel,
    pub evaluation: EvaluationModel,
    pub compensation: Option<CompensationModel>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimHyperparameters {
    pub variable: String,
    pub rates: Vec<f64>,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub transition: Vec<DimHyperparameters>,
    pub lc: SeKernel,
    pub rp2: SeKernel,
    pub compensation: Option<SeKernel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEntropyPair {
    pub lc: ClassifierDiagnostics,
    pub rp2: ClassifierDiagnostics,
}

/// Per-patient verdict on the training cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientVerdict {
    pub patient_id: String,
    pub verdict: DecisionVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub cv: Option<CvTable>,
    pub cross_entropy: CrossEntropyPair,
    pub hyperparameters: Hyperparameters,
    pub verdicts: Vec<PatientVerdict>,
    /// Why no compensation model was fitted, if none was.
    pub compensation_note: Option<String>,
}

/// Per-patient seed derived from the run seed.
pub fn patient_seed(base: u64, index: usize) -> u64 {
    base ^ index as u64
}

/// Scaled final-stage states and doses of every patient.
fn final_stage(cohort: &ScaledCohort) -> (&[Vec<f64>], &[f64]) {
    (&cohort.states[STAGES - 1], &cohort.doses[STAGES - 1])
}

/// Held-out transition MSE table over stratified folds.
pub fn cross_validate(cohort: &ScaledCohort, config: &RunConfig) -> Result<CvTable> {
    let folds = split_folds_stratified(&cohort.outcome_strata(), config.folds.min(cohort.n()), config.seed)?;
    Ok(cv_mse(cohort, &config.predictor, &config.transition_grid, config.jitter, &folds)?)
}

/// In-sample cross-entropy of `evaluation` against the same classifiers
/// refitted on the point predictor's final states.
pub fn cross_entropy_pair(
    cohort: &ScaledCohort,
    transition: &TransitionModel,
    evaluation: &EvaluationModel,
    config: &RunConfig,
) -> Result<CrossEntropyPair> {
    let (s_last, a_last) = final_stage(cohort);
    let point_only: Vec<Vec<f64>> = s_last
        .iter()
        .zip(a_last)
        .map(|(s, &a)| transition.predict_point(s, a))
        .collect::<std::result::Result<_, _>>()?;
    let baseline = EvaluationModel::fit(point_only, &cohort.lc, &cohort.rp2, &config.evaluation_grid, config.jitter)?;
    let in_sample = |model: &EvaluationModel, outcome: Outcome| -> Result<Vec<f64>> {
        model
            .inputs
            .iter()
            .map(|s| predict_logit(model, outcome, s).map(|(m, _)| sigmoid(m)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(Error::from)
    };
    let diagnostics = |outcome: Outcome, labels: &[u8]| -> Result<ClassifierDiagnostics> {
        Ok(ClassifierDiagnostics::compute(
            in_sample(evaluation, outcome)?,
            in_sample(&baseline, outcome)?,
            labels,
        )?)
    };
    Ok(CrossEntropyPair {
        lc: diagnostics(Outcome::Lc, &cohort.lc)?,
        rp2: diagnostics(Outcome::Rp2, &cohort.rp2)?,
    })
}

/// Train the whole pipeline on `cohort`.
pub fn train(cohort: &ScaledCohort, config: &RunConfig) -> Result<(TrainedPipeline, TrainReport)> {
    config.validate()?;
    let predictor = fit_point_predictor(cohort, &config.predictor)?;
    let transition = fit_transition(cohort, predictor, &config.transition_grid, config.jitter)?;

    let (s_last, a_last) = final_stage(cohort);
    let predicted: Vec<Vec<f64>> = s_last
        .iter()
        .zip(a_last)
        .map(|(s, &a)| predict_next_state(&transition, s, a).map(|p| p.mean))
        .collect::<std::result::Result<_, _>>()?;
    let mut evaluation = EvaluationModel::fit(predicted, &cohort.lc, &cohort.rp2, &config.evaluation_grid, config.jitter)?;
    evaluation.laplace_variance = config.laplace_variance;

    let cross_entropy = cross_entropy_pair(cohort, &transition, &evaluation, config)?;
    let cv = if config.cross_validate {
        Some(cross_validate(cohort, config)?)
    } else {
        None
    };

    let mut pipeline = TrainedPipeline {
        schema: config.schema.clone(),
        scaling: cohort.scaling.clone(),
        transition,
        evaluation,
        compensation: None,
        config: config.clone(),
    };

    let mut verdicts = Vec::new();
    let mut compensation_note = None;
    if config.fit_compensation {
        verdicts = pipeline.decide_cohort(cohort)?;
        match pipeline.fit_compensation_from(cohort, &verdicts) {
            Ok(m) => pipeline.compensation = Some(m),
            Err(Error::Decision(e @ DecisionError::InsufficientCases { .. })) => {
                log::warn!("no compensation model: {e}");
                compensation_note = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }

    let hyperparameters = pipeline.hyperparameters();
    Ok((
        pipeline,
        TrainReport {
            cv,
            cross_entropy,
            hyperparameters,
            verdicts,
            compensation_note,
        },
    ))
}

/// One dose of a what-if sweep, in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfPoint {
    pub dose: f64,
    pub prob_lc: Band,
    pub prob_rp2: Band,
    pub reward: Band,
    pub reward_std: f64,
    pub logit_lc: (f64, f64),
    pub logit_rp2: (f64, f64),
}

fn prob_band(d: &OutcomeDistribution, outcome: Outcome) -> Band {
    let m = d.get(outcome);
    let (lower, upper) = m.interval();
    Band {
        mean: m.prob_mean,
        lower,
        upper,
    }
}

impl TrainedPipeline {
    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            transition: self
                .transition
                .per_dim
                .iter()
                .map(|d| DimHyperparameters {
                    variable: self.scaling.variables[d.dim].name.clone(),
                    rates: d.kernel.rates.clone(),
                    precision: d.kernel.precision,
                })
                .collect(),
            lc: self.evaluation.lc.kernel.clone(),
            rp2: self.evaluation.rp2.kernel.clone(),
            compensation: self.compensation.as_ref().map(|c| c.kernel.clone()),
        }
    }

    /// Scale a state given in original units.
    pub fn scale_state(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.scaling.q() {
            return Err(Error::Config(format!(
                "state has {} values, the schema has {}",
                state.len(),
                self.scaling.q()
            )));
        }
        Ok(self.scaling.scale_state(state))
    }

    fn check_dose(&self, dose: f64) -> std::result::Result<(), DecisionError> {
        let b = self.scaling.dose_bounds;
        if !(dose.is_finite() && b.contains(dose)) {
            return Err(DecisionError::DoseOutOfBounds {
                dose,
                min: b.min,
                max: b.max,
            });
        }
        Ok(())
    }

    /// Outcome and reward bands at each dose for a state in original units.
    /// Rewards are Monte-Carlo with the configured sample count and `seed`.
    pub fn whatif(&self, state: &[f64], doses: &[f64], seed: u64) -> Result<Vec<WhatIfPoint>> {
        let scaled = self.scale_state(state)?;
        for &d in doses {
            self.check_dose(d)?;
        }
        doses
            .par_iter()
            .map(|&dose| {
                let dist = self.outcomes(&scaled, dose)?;
                let r = sample_reward(&dist, self.config.decision.samples, seed, &self.config.decision.reward)?;
                Ok(WhatIfPoint {
                    dose,
                    prob_lc: prob_band(&dist, Outcome::Lc),
                    prob_rp2: prob_band(&dist, Outcome::Rp2),
                    reward: Band {
                        mean: r.mean,
                        lower: r.mean - 2.0 * r.std,
                        upper: r.mean + 2.0 * r.std,
                    },
                    reward_std: r.std,
                    logit_lc: (dist.lc.logit_mean, dist.lc.logit_variance),
                    logit_rp2: (dist.rp2.logit_mean, dist.rp2.logit_variance),
                })
            })
            .collect()
    }

    /// Adjudicate a physician dose for a state in original units.
    pub fn decide(&self, state: &[f64], physician_dose: f64, seed: u64) -> Result<DecisionVerdict> {
        let scaled = self.scale_state(state)?;
        self.decide_scaled(&scaled, physician_dose, seed)
    }

    pub fn decide_scaled(&self, scaled: &[f64], physician_dose: f64, seed: u64) -> Result<DecisionVerdict> {
        self.check_dose(physician_dose)?;
        Ok(compare_prescriptions(self, scaled, physician_dose, &self.config.decision, seed)?)
    }

    /// Verdicts for every patient's final-stage state, with the observed final
    /// dose as the physician's prescription.
    pub fn decide_cohort(&self, cohort: &ScaledCohort) -> Result<Vec<PatientVerdict>> {
        let (s_last, a_last) = final_stage(cohort);
        (0..cohort.n())
            .into_par_iter()
            .map(|i| {
                let dose = self.scaling.unscale_dose(a_last[i]);
                let verdict = self.decide_scaled(&s_last[i], dose, patient_seed(self.config.seed, i))?;
                Ok(PatientVerdict {
                    patient_id: cohort.patient_ids[i].clone(),
                    verdict,
                })
            })
            .collect()
    }

    /// Verdicts for patients given in original units, with each final-stage
    /// dose as the physician's prescription and seeds derived from `base_seed`.
    pub fn decide_records(&self, records: &[PatientRecord], base_seed: u64) -> Result<Vec<PatientVerdict>> {
        records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let verdict = self.decide(&r.states[STAGES - 1], r.doses[STAGES - 1], patient_seed(base_seed, i))?;
                Ok(PatientVerdict {
                    patient_id: r.patient_id.clone(),
                    verdict,
                })
            })
            .collect()
    }

    /// Fit the compensation model from cohort verdicts (aligned by index).
    pub fn fit_compensation_from(&self, cohort: &ScaledCohort, verdicts: &[PatientVerdict]) -> Result<CompensationModel> {
        let (s_last, _) = final_stage(cohort);
        let verdicts: Vec<&DecisionVerdict> = verdicts.iter().map(|v| &v.verdict).collect();
        self.fit_compensation_cases(s_last, &verdicts)
    }

    /// Fit the compensation model from scaled states and their verdicts.
    pub fn fit_compensation_cases(&self, states: &[Vec<f64>], verdicts: &[&DecisionVerdict]) -> Result<CompensationModel> {
        if states.len() != verdicts.len() {
            return Err(Error::Config(format!(
                "{} states but {} verdicts",
                states.len(),
                verdicts.len()
            )));
        }
        let cases: Vec<CompensationCase> = verdicts
            .iter()
            .zip(states)
            .map(|(v, s)| CompensationCase {
                state: s.clone(),
                ai_dose: v.ai_dose,
                physician_dose: v.physician_dose,
                p_value: v.p_value,
            })
            .collect();
        self.fit_compensation(&cases)
    }

    /// Fit the compensation model on the configured variables.
    pub fn fit_compensation(&self, cases: &[CompensationCase]) -> Result<CompensationModel> {
        let vars: Vec<(usize, String)> = self
            .config
            .compensation_variables
            .iter()
            .map(|name| {
                self.scaling
                    .index_of(name)
                    .map(|k| (k, name.clone()))
                    .ok_or_else(|| Error::Config(format!("unknown compensation variable `{name}`")))
            })
            .collect::<Result<_>>()?;
        Ok(fit_compensation(
            cases,
            &vars,
            &self.config.compensation_grid,
            self.config.decision.alpha,
        )?)
    }

    /// Transition MSE table and cross-entropy pair of this pipeline on
    /// `cohort`, which must be preprocessed with the pipeline's scaling.
    pub fn evaluate(&self, cohort: &ScaledCohort) -> Result<(CvTable, CrossEntropyPair)> {
        if cohort.scaling != self.scaling {
            return Err(Error::Config("cohort scaling differs from the model's training scaling".into()));
        }
        let cv = cross_validate(cohort, &self.config)?;
        let ce = cross_entropy_pair(cohort, &self.transition, &self.evaluation, &self.config)?;
        Ok((cv, ce))
    }

    pub fn compensation_map(&self, var1: &str, var2: &str, resolution: usize) -> Result<CompensationMap> {
        let model = self
            .compensation
            .as_ref()
            .ok_or(DecisionError::InsufficientCases { qualifying: 0 })?;
        Ok(compensation_map(model, &self.scaling, var1, var2, resolution)?)
    }
}

impl OutcomeModel for TrainedPipeline {
    fn outcomes(&self, state: &[f64], dose: f64) -> std::result::Result<OutcomeDistribution, DecisionError> {
        let a = self.scaling.scale_dose(dose);
        let next = predict_next_state(&self.transition, state, a)?;
        Ok(outcome_distribution(&next, &self.evaluation, self.config.eiv)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SyntheticTruth;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.predictor = crate::transition::PredictorConfig::Linear { ridge: 1e-6 };
        c.cross_validate = false;
        c.decision.samples = 200;
        c.schema.truncation_quantile = 1.0;
        c
    }

    #[test]
    fn trains_and_answers_queries() {
        let truth = SyntheticTruth::default();
        let records = truth.generate_records(30, 1, "p");
        let cohort = crate::cohort::preprocess(&records, &small_config().schema).unwrap();
        let (p, report) = train(&cohort, &small_config()).unwrap();
        assert_eq!(report.verdicts.len(), 30);
        for v in &report.verdicts {
            assert_eq!(v.verdict.chosen == crate::decision::Choice::Ai, v.verdict.p_value < 0.05);
        }
        let state = records[0].states[2].clone();
        let w = p.whatif(&state, &[2.0, 3.0], 5).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w[0].prob_lc.lower <= w[0].prob_lc.mean && w[0].prob_lc.mean <= w[0].prob_lc.upper);
        assert_eq!(w, p.whatif(&state, &[2.0, 3.0], 5).unwrap());
        assert!(matches!(
            p.whatif(&state, &[7.0], 5),
            Err(Error::Decision(DecisionError::DoseOutOfBounds { .. }))
        ));
    }
}
