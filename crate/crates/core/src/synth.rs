//! Seeded synthetic cohorts with a known ground truth.
//!
//! States live in a latent unit cube. Each active variable moves by an affine
//! map of the state and the scaled dose plus a sinusoidal bias term, so a
//! predictor that only knows the affine part is biased in a known way. Final
//! outcomes are Bernoulli draws from logistic functions of the stage-4 state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{DoseBounds, PatientRecord, ScaledCohort, Scaling, VariableScaling, VariableSchema};
use crate::decision::DoseGrid;
use crate::outcome::sigmoid;
use crate::propagation::RewardParams;
use crate::transition::{AffinePredictor, PointPredictor};
use crate::STAGES;

/// Active (time-varying) variables of the default schema.
pub const ACTIVE: usize = 9;
const TUMOR: usize = 7;
const LUNG: usize = 8;
const Q: usize = 12;

/// Original-unit offset and span of each default-schema variable.
const UNITS: [(f64, f64); Q] = [
    (0.5, 12.0),  // il4
    (1.0, 20.0),  // il10
    (0.2, 6.0),   // il5
    (50.0, 900.0), // ip10
    (2.0, 80.0),  // mtv
    (0.001, 0.05), // glszm_lzlge
    (0.1, 0.9),   // glszm_zsv
    (40.0, 50.0), // tumor_geud
    (5.0, 20.0),  // lung_geud
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTruth {
    /// Amplitude of the sinusoidal bias added to every active transition.
    /// The two dose-driven variables carry twice this amplitude.
    pub bias_amplitude: f64,
    pub lc_slope: f64,
    pub lc_center: f64,
    pub rp2_slope: f64,
    pub rp2_center: f64,
    /// Shift of the rp2 logit per carried risk allele (first SNP).
    pub rp2_snp_effect: f64,
    /// Physician prescription relative to the true optimum, in Gy/fraction.
    pub physician_offset: f64,
    pub grid: DoseGrid,
    pub reward: RewardParams,
}

impl Default for SyntheticTruth {
    fn default() -> Self {
        SyntheticTruth {
            bias_amplitude: 0.06,
            lc_slope: 12.0,
            lc_center: 0.45,
            rp2_slope: 12.0,
            rp2_center: 0.6,
            rp2_snp_effect: 0.8,
            physician_offset: -0.5,
            grid: DoseGrid::default(),
            reward: RewardParams::default(),
        }
    }
}

/// Affine coefficients of the true transition for active dim `j`:
/// `(bias, self weight, neighbour weight, dose weight)`.
fn affine_coefficients(j: usize) -> (f64, f64, f64, f64) {
    if j == TUMOR || j == LUNG {
        (0.05, 0.4, 0.05, 0.45)
    } else {
        (0.1, 0.5, 0.1, 0.05)
    }
}

fn identity_scaling() -> Scaling {
    let schema = VariableSchema::default();
    Scaling {
        variables: schema
            .variables
            .iter()
            .map(|v| VariableScaling {
                name: v.name.clone(),
                constant: v.constant,
                cap: None,
                min: 0.0,
                max: 1.0,
            })
            .collect(),
        dose_bounds: DoseBounds::default(),
    }
}

fn initial_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut s: Vec<f64> = (0..ACTIVE).map(|_| rng.random_range(0.1..0.9)).collect();
    s.extend((ACTIVE..Q).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }));
    s
}

/// Cohort in scaled units with i.i.d. uniform states, doses and labels and an
/// identity scaling. Carries no structure; used to exercise the numerics.
pub fn random_scaled_cohort(n: usize, seed: u64) -> ScaledCohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states: [Vec<Vec<f64>>; STAGES] = Default::default();
    let mut doses: [Vec<f64>; STAGES] = Default::default();
    let mut lc = Vec::with_capacity(n);
    let mut rp2 = Vec::with_capacity(n);
    for _ in 0..n {
        let s0 = initial_state(&mut rng);
        for t in 0..STAGES {
            let mut s = s0.clone();
            for v in s.iter_mut().take(ACTIVE) {
                *v = rng.random();
            }
            states[t].push(s);
            doses[t].push(rng.random());
        }
        lc.push(rng.random_bool(0.5) as u8);
        rp2.push(rng.random_bool(0.5) as u8);
    }
    ScaledCohort {
        patient_ids: (0..n).map(|i| format!("r{i:04}")).collect(),
        states,
        doses,
        lc,
        rp2,
        scaling: identity_scaling(),
    }
}

const STUDY_STREAM: u64 = 0x5eed_5eed;

/// One synthetic patient in latent units.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPatient {
    pub states: [Vec<f64>; STAGES],
    /// Scaled doses of the three stages.
    pub doses: [f64; STAGES],
    pub lc: bool,
    pub rp2: bool,
}

impl SyntheticTruth {
    /// True next state from a latent state and a scaled dose `u`.
    pub fn step(&self, z: &[f64], u: f64) -> Vec<f64> {
        let mut next = z.to_vec();
        for j in 0..ACTIVE {
            let (c, w_self, w_next, w_dose) = affine_coefficients(j);
            let amplitude = if j == TUMOR || j == LUNG {
                2.0 * self.bias_amplitude
            } else {
                self.bias_amplitude
            };
            next[j] = c
                + w_self * z[j]
                + w_next * z[(j + 1) % ACTIVE]
                + w_dose * u
                + amplitude * (2.0 * std::f64::consts::PI * z[j] + 0.7 * j as f64).sin();
        }
        next
    }

    /// The affine part of [`Self::step`] as a point predictor on the identity
    /// scaling.
    pub fn linear_part(&self) -> AffinePredictor {
        let mut weights = Vec::with_capacity(ACTIVE);
        let mut bias = Vec::with_capacity(ACTIVE);
        for j in 0..ACTIVE {
            let (c, w_self, w_next, w_dose) = affine_coefficients(j);
            let mut w = vec![0.0; Q + 1];
            w[j] = w_self;
            w[(j + 1) % ACTIVE] += w_next;
            w[Q] = w_dose;
            weights.push(w);
            bias.push(c);
        }
        AffinePredictor::new(Q, (0..ACTIVE).collect(), weights, bias).expect("consistent affine truth")
    }

    /// True `(P(LC), P(RP2))` of a stage-4 latent state.
    pub fn outcome_probabilities(&self, z4: &[f64]) -> (f64, f64) {
        let lc = sigmoid(self.lc_slope * (z4[TUMOR] - self.lc_center));
        let rp2 = sigmoid(self.rp2_slope * (z4[LUNG] - self.rp2_center) + self.rp2_snp_effect * z4[ACTIVE]);
        (lc, rp2)
    }

    fn scale_dose(&self, dose: f64) -> f64 {
        let b = DoseBounds::default();
        (dose - b.min) / (b.max - b.min)
    }

    /// True reward of delivering `dose` Gy/fraction at the final stage.
    pub fn true_reward(&self, z3: &[f64], dose: f64) -> f64 {
        let (lc, rp2) = self.outcome_probabilities(&self.step(z3, self.scale_dose(dose)));
        self.reward.reward(lc, rp2)
    }

    /// Grid dose maximising the true reward (first maximum on ties).
    pub fn optimal_dose(&self, z3: &[f64]) -> f64 {
        let mut best = (f64::NEG_INFINITY, self.grid.min);
        for d in self.grid.points().expect("valid dose grid") {
            let r = self.true_reward(z3, d);
            if r > best.0 {
                best = (r, d);
            }
        }
        best.1
    }

    /// The simulated physician's prescription: the optimum shifted by
    /// `physician_offset`, kept inside the grid.
    pub fn physician_dose(&self, z3: &[f64]) -> f64 {
        let d = self.optimal_dose(z3) + self.physician_offset;
        // snap to the grid lattice so dose lookups stay exact
        let k = ((d - self.grid.min) / self.grid.step).round().max(0.0);
        (self.grid.min + k * self.grid.step).clamp(self.grid.min, self.grid.max)
    }

    /// Latent patients of a retrospective cohort: every stage dose uniform
    /// over the dose bounds, outcomes drawn from the stage-4 state.
    pub fn generate_latent(&self, n: usize, seed: u64) -> Vec<LatentPatient> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s1 = initial_state(&mut rng);
                let u1: f64 = rng.random();
                let s2 = self.step(&s1, u1);
                let u2: f64 = rng.random();
                let s3 = self.step(&s2, u2);
                let u3: f64 = rng.random();
                let s4 = self.step(&s3, u3);
                let (p_lc, p_rp2) = self.outcome_probabilities(&s4);
                let lc = rng.random::<f64>() < p_lc;
                let rp2 = rng.random::<f64>() < p_rp2;
                LatentPatient {
                    states: [s1, s2, s3],
                    doses: [u1, u2, u3],
                    lc,
                    rp2,
                }
            })
            .collect()
    }

    /// Latent patients as a cohort on the identity scaling.
    pub fn generate_scaled(&self, n: usize, seed: u64) -> ScaledCohort {
        let latent = self.generate_latent(n, seed);
        let col = |t: usize| latent.iter().map(|p| p.states[t].clone()).collect::<Vec<_>>();
        let dcol = |t: usize| latent.iter().map(|p| p.doses[t]).collect::<Vec<_>>();
        ScaledCohort {
            patient_ids: (0..n).map(|i| format!("s{i:04}")).collect(),
            states: [col(0), col(1), col(2)],
            doses: [dcol(0), dcol(1), dcol(2)],
            lc: latent.iter().map(|p| p.lc as u8).collect(),
            rp2: latent.iter().map(|p| p.rp2 as u8).collect(),
            scaling: identity_scaling(),
        }
    }

    /// Latent state to original clinical units.
    pub fn to_original(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(UNITS).map(|(&v, (lo, span))| lo + span * v).collect()
    }

    pub fn from_original(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(UNITS).map(|(&v, (lo, span))| (v - lo) / span).collect()
    }

    /// Patients in original units, ids `{prefix}{index:04}`.
    pub fn generate_records(&self, n: usize, seed: u64, prefix: &str) -> Vec<PatientRecord> {
        let b = DoseBounds::default();
        self.generate_latent(n, seed)
            .into_iter()
            .enumerate()
            .map(|(i, p)| PatientRecord {
                patient_id: format!("{prefix}{i:04}"),
                states: p.states.clone().map(|s| self.to_original(&s)),
                doses: p.doses.map(|u| b.min + u * (b.max - b.min)),
                lc: p.lc,
                rp2: p.rp2,
            })
            .collect()
    }

    /// Decision-study patients: stages 1 and 2 as in [`Self::generate_records`],
    /// the final dose replaced by the simulated physician's prescription and
    /// the outcomes drawn at that dose.
    pub fn generate_study(&self, n: usize, seed: u64, prefix: &str) -> Vec<StudyPatient> {
        let b = DoseBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ STUDY_STREAM);
        self.generate_latent(n, seed)
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let z3 = &p.states[2];
                let optimal_dose = self.optimal_dose(z3);
                let physician_dose = self.physician_dose(z3);
                let (p_lc, p_rp2) = self.outcome_probabilities(&self.step(z3, self.scale_dose(physician_dose)));
                let record = PatientRecord {
                    patient_id: format!("{prefix}{i:04}"),
                    states: p.states.clone().map(|s| self.to_original(&s)),
                    doses: [
                        b.min + p.doses[0] * (b.max - b.min),
                        b.min + p.doses[1] * (b.max - b.min),
                        physician_dose,
                    ],
                    lc: rng.random::<f64>() < p_lc,
                    rp2: rng.random::<f64>() < p_rp2,
                };
                StudyPatient {
                    reward_gap: self.true_reward(z3, optimal_dose) - self.true_reward(z3, physician_dose),
                    record,
                    optimal_dose,
                    physician_dose,
                }
            })
            .collect()
    }
}

/// A decision-study patient with the ground truth behind the prescription.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyPatient {
    pub record: PatientRecord,
    pub optimal_dose: f64,
    pub physician_dose: f64,
    /// True reward at the optimum minus true reward at the physician's dose.
    pub reward_gap: f64,
}

/// External point-predictor file for `cohort`: one row per patient and stage
/// holding `predictor`'s output for that stage's `(state, dose)`, in original
/// units.
pub fn external_predictions_csv(cohort: &ScaledCohort, predictor: &AffinePredictor) -> String {
    let scaling = &cohort.scaling;
    let point = PointPredictor::Affine(predictor.clone());
    let mut out = String::from("patient_id,stage");
    for &k in &predictor.active {
        out.push(',');
        out.push_str(&scaling.variables[k].name);
    }
    out.push('\n');
    for i in 0..cohort.n() {
        for t in 0..STAGES {
            let y = point.predict(&cohort.joint_input(t, i)).expect("predictor matches cohort width");
            out.push_str(&format!("{},{}", cohort.patient_ids[i], t + 1));
            for &k in &predictor.active {
                out.push_str(&format!(",{}", scaling.unscale_value(k, y[k])));
            }
            out.push('\n');
        }
    }
    out
}

/// Write `records` as the two cohort CSV files (states, outcomes).
pub fn records_to_csv(records: &[PatientRecord], schema: &VariableSchema) -> (String, String) {
    let mut states = String::from("patient_id,stage,dose_gy_per_frac");
    for v in &schema.variables {
        states.push(',');
        states.push_str(&v.name);
    }
    states.push('\n');
    let mut outcomes = String::from("patient_id,lc,rp2\n");
    for r in records {
        for t in 0..STAGES {
            states.push_str(&format!("{},{},{}", r.patient_id, t + 1, r.doses[t]));
            for v in &r.states[t] {
                states.push_str(&format!(",{v}"));
            }
            states.push('\n');
        }
        outcomes.push_str(&format!("{},{},{}\n", r.patient_id, r.lc as u8, r.rp2 as u8));
    }
    (states, outcomes)
}
