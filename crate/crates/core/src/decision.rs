//! Dose optimisation, physician-versus-AI adjudication and the dose
//! compensation model.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::cohort::Scaling;
use crate::gp::{fit_hyperparams, kernel_row, GpError, GramMatrix, GridOptimum, GridSpec, SeKernel};
use crate::propagation::{sample_reward, OutcomeDistribution, PropagationError, RewardDistribution, RewardParams};
use crate::transition::TransitionError;

/// Nugget on the compensation Gram; prescriptions are noisy decisions.
pub const COMPENSATION_JITTER: f64 = 1e-4;
/// Nugget candidates searched for the compensation GP, in units of the prior
/// variance. The smallest is the floor.
pub const COMPENSATION_NUGGETS: [f64; 5] = [COMPENSATION_JITTER, 1e-3, 1e-2, 1e-1, 1.0];
pub const MIN_COMPENSATION_CASES: usize = 3;
const MAX_GRID_POINTS: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecisionError {
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("dose {dose} Gy/fraction is outside [{min}, {max}]")]
    DoseOutOfBounds { dose: f64, min: f64, max: f64 },
    #[error("dose grid: {0}")]
    Grid(String),
    #[error("insufficient AI-superior cases ({qualifying} qualifying, need at least {MIN_COMPENSATION_CASES})")]
    InsufficientCases { qualifying: usize },
    #[error("variable `{0}` is not in the compensation model")]
    UnknownVariable(String),
    #[error("{0}")]
    Invalid(String),
}

/// Candidate final-stage doses in Gy/fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for DoseGrid {
    fn default() -> Self {
        DoseGrid {
            min: 1.5,
            max: 5.0,
            step: 0.1,
        }
    }
}

impl DoseGrid {
    pub fn single(dose: f64) -> Self {
        DoseGrid {
            min: dose,
            max: dose,
            step: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), DecisionError> {
        let ok = self.min.is_finite() && self.max.is_finite() && self.step.is_finite();
        if !ok || self.min <= 0.0 || self.step <= 0.0 || self.max < self.min {
            return Err(DecisionError::Grid(format!(
                "need 0 < min <= max and step > 0 (got {}..{} step {})",
                self.min, self.max, self.step
            )));
        }
        if (self.max - self.min) / self.step > MAX_GRID_POINTS {
            return Err(DecisionError::Grid("more than 10^4 grid steps".into()));
        }
        Ok(())
    }

    /// Grid doses `min + i·step` up to `max` (with a small tolerance for
    /// rounding in the step count).
    pub fn points(&self) -> Result<Vec<f64>, DecisionError> {
        self.validate()?;
        let steps = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        Ok((0..=steps).map(|i| self.min + i as f64 * self.step).collect())
    }

    pub fn contains(&self, dose: f64) -> bool {
        dose >= self.min - 1e-12 && dose <= self.max + 1e-12
    }
}

/// Anything that maps a final-stage state and a dose (Gy/fraction) to outcome
/// probability distributions.
pub trait OutcomeModel: Sync {
    fn outcomes(&self, state: &[f64], dose: f64) -> Result<OutcomeDistribution, DecisionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosePoint {
    pub dose: f64,
    pub outcomes: OutcomeDistribution,
    /// Reward at the mean probabilities.
    pub reward: f64,
    /// Reward over the corners of the clipped ±2 sd probability box; the
    /// reward is monotone in each probability, so these bound it on the box.
    pub reward_low: f64,
    pub reward_high: f64,
}

impl DosePoint {
    pub fn new(dose: f64, outcomes: OutcomeDistribution, params: &RewardParams) -> Self {
        let (lc_lo, lc_hi) = outcomes.lc.interval();
        let (rp_lo, rp_hi) = outcomes.rp2.interval();
        DosePoint {
            dose,
            reward: params.reward(outcomes.lc.prob_mean, outcomes.rp2.prob_mean),
            reward_low: params.reward(lc_lo, rp_hi),
            reward_high: params.reward(lc_hi, rp_lo),
            outcomes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseCurve {
    pub points: Vec<DosePoint>,
    pub best_index: usize,
}

impl DoseCurve {
    pub fn best(&self) -> &DosePoint {
        &self.points[self.best_index]
    }
}

/// Index of the first maximum; later equal values never win.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Evaluate the plug-in reward at every grid dose and return the lowest dose
/// attaining the maximum, with the full curve.
pub fn optimize_dose<M: OutcomeModel + ?Sized>(
    model: &M,
    state: &[f64],
    grid: &DoseGrid,
    params: &RewardParams,
) -> Result<(f64, DoseCurve), DecisionError> {
    let doses = grid.points()?;
    let points: Vec<DosePoint> = doses
        .par_iter()
        .map(|&d| Ok(DosePoint::new(d, model.outcomes(state, d)?, params)))
        .collect::<Result<_, DecisionError>>()?;
    let rewards: Vec<f64> = points.iter().map(|p| p.reward).collect();
    let best_index = argmax_first(&rewards).ok_or_else(|| DecisionError::Grid("empty grid".into()))?;
    Ok((points[best_index].dose, DoseCurve { points, best_index }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// One-sided Welch test of `H0: mean(a) <= mean(b)`. When both samples have
/// zero variance the p-value is 0 if `mean(a) > mean(b)` and 1 otherwise.
pub fn welch_one_sided(a: &RewardDistribution, b: &RewardDistribution) -> WelchTest {
    let (na, nb) = (a.sample_count as f64, b.sample_count as f64);
    let (va, vb) = (a.std * a.std / na, b.std * b.std / nb);
    let se2 = va + vb;
    let diff = a.mean - b.mean;
    if se2 == 0.0 {
        let (t, p_value) = if diff > 0.0 {
            (f64::INFINITY, 0.0)
        } else if diff < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 1.0)
        };
        return WelchTest {
            t,
            df: f64::INFINITY,
            p_value,
        };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    WelchTest {
        t,
        df,
        p_value: dist.sf(t).clamp(0.0, 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    #[serde(rename = "AI")]
    Ai,
    #[serde(rename = "PHYSICIAN")]
    Physician,
}

impl Choice {
    pub fn as_str(self) -> &'static str {
        match self {
            Choice::Ai => "AI",
            Choice::Physician => "PHYSICIAN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionConfig {
    pub grid: DoseGrid,
    pub samples: usize,
    pub alpha: f64,
    /// Width above which a ±2 sd probability interval marks the AI dose as
    /// unreliable.
    pub reliability_width: f64,
    pub reward: RewardParams,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            grid: DoseGrid::default(),
            samples: 1000,
            alpha: 0.05,
            reliability_width: 0.5,
            reward: RewardParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVerdict {
    pub ai_dose: f64,
    pub physician_dose: f64,
    pub ai_outcomes: OutcomeDistribution,
    pub physician_outcomes: OutcomeDistribution,
    pub ai_reward: RewardDistribution,
    pub physician_reward: RewardDistribution,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub chosen: Choice,
    pub reliability_flag: bool,
    pub sample_count: usize,
    pub seed: u64,
}

/// Whether either outcome's clipped ±2 sd interval is wider than `width`.
pub fn unreliable(outcomes: &OutcomeDistribution, width: f64) -> bool {
    [outcomes.lc.interval(), outcomes.rp2.interval()]
        .iter()
        .any(|(lo, hi)| hi - lo > width)
}

/// Optimise the dose, draw reward samples at both doses with the same seed and
/// choose the AI dose iff the one-sided Welch p-value is below `alpha`.
pub fn compare_prescriptions<M: OutcomeModel + ?Sized>(
    model: &M,
    state: &[f64],
    physician_dose: f64,
    config: &DecisionConfig,
    seed: u64,
) -> Result<DecisionVerdict, DecisionError> {
    config.grid.validate()?;
    if !config.grid.contains(physician_dose) {
        return Err(DecisionError::DoseOutOfBounds {
            dose: physician_dose,
            min: config.grid.min,
            max: config.grid.max,
        });
    }
    let (ai_dose, curve) = optimize_dose(model, state, &config.grid, &config.reward)?;
    let ai_outcomes = curve.best().outcomes;
    let physician_outcomes = model.outcomes(state, physician_dose)?;
    let ai_reward = sample_reward(&ai_outcomes, config.samples, seed, &config.reward)?;
    let physician_reward = sample_reward(&physician_outcomes, config.samples, seed, &config.reward)?;
    let test = welch_one_sided(&ai_reward, &physician_reward);
    let chosen = if test.p_value < config.alpha {
        Choice::Ai
    } else {
        Choice::Physician
    };
    Ok(DecisionVerdict {
        ai_dose,
        physician_dose,
        reliability_flag: unreliable(&ai_outcomes, config.reliability_width),
        ai_outcomes,
        physician_outcomes,
        ai_reward,
        physician_reward,
        t_statistic: test.t,
        degrees_of_freedom: test.df,
        p_value: test.p_value,
        chosen,
        sample_count: config.samples,
        seed,
    })
}

/// One patient's input to the compensation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationCase {
    /// Full scaled final-stage state.
    pub state: Vec<f64>,
    pub ai_dose: f64,
    pub physician_dose: f64,
    pub p_value: f64,
}

/// GP regression of `δ = ai_dose - physician_dose` (Gy/fraction) on a subset
/// of scaled state variables, with a constant mean at the training average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CompensationPayload", try_from = "CompensationPayload")]
pub struct CompensationModel {
    pub variables: Vec<String>,
    pub dims: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub mean_offset: f64,
    pub kernel: SeKernel,
    pub jitter: f64,
    gram: GramMatrix,
    weights: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct CompensationPayload {
    variables: Vec<String>,
    dims: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    mean_offset: f64,
    kernel: SeKernel,
    jitter: f64,
}

impl From<CompensationModel> for CompensationPayload {
    fn from(m: CompensationModel) -> Self {
        CompensationPayload {
            variables: m.variables,
            dims: m.dims,
            inputs: m.inputs,
            targets: m.targets,
            mean_offset: m.mean_offset,
            kernel: m.kernel,
            jitter: m.jitter,
        }
    }
}

impl TryFrom<CompensationPayload> for CompensationModel {
    type Error = DecisionError;

    fn try_from(p: CompensationPayload) -> Result<Self, Self::Error> {
        CompensationModel::build(p.variables, p.dims, p.inputs, p.targets, p.mean_offset, p.kernel, p.jitter)
    }
}

impl CompensationModel {
    fn build(
        variables: Vec<String>,
        dims: Vec<usize>,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        mean_offset: f64,
        kernel: SeKernel,
        jitter: f64,
    ) -> Result<Self, DecisionError> {
        let gram = GramMatrix::new(&inputs, &kernel.rates, jitter)?;
        let centred = DVector::from_iterator(targets.len(), targets.iter().map(|t| t - mean_offset));
        let weights = gram.solve(&centred)?;
        Ok(CompensationModel {
            variables,
            dims,
            inputs,
            targets,
            mean_offset,
            kernel,
            jitter,
            gram,
            weights,
        })
    }

    /// Predicted `(δ, variance)` at a point in the model's scaled subspace.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64), DecisionError> {
        if x.len() != self.dims.len() {
            return Err(GpError::DimensionMismatch {
                expected: self.dims.len(),
                got: x.len(),
            }
            .into());
        }
        let k = kernel_row(&self.inputs, x, &self.kernel.rates);
        let v = self.gram.forward(&k)?;
        Ok((
            self.mean_offset + k.dot(&self.weights),
            ((1.0 - v.norm_squared()) / self.kernel.precision).max(0.0),
        ))
    }

    /// Prediction from a full scaled state vector.
    pub fn predict_state(&self, state: &[f64]) -> Result<(f64, f64), DecisionError> {
        let x: Vec<f64> = self.dims.iter().map(|&k| state[k]).collect();
        self.predict(&x)
    }
}

/// Fit the compensation GP on the cases whose p-value is below `alpha`.
/// `variables` pairs each chosen state index with its name.
pub fn fit_compensation(
    cases: &[CompensationCase],
    variables: &[(usize, String)],
    grid: &GridSpec,
    alpha: f64,
) -> Result<CompensationModel, DecisionError> {
    if variables.is_empty() {
        return Err(DecisionError::Invalid("no compensation variables".into()));
    }
    let chosen: Vec<&CompensationCase> = cases.iter().filter(|c| c.p_value < alpha).collect();
    if chosen.len() < MIN_COMPENSATION_CASES {
        return Err(DecisionError::InsufficientCases {
            qualifying: chosen.len(),
        });
    }
    let dims: Vec<usize> = variables.iter().map(|(k, _)| *k).collect();
    let inputs: Vec<Vec<f64>> = chosen.iter().map(|c| dims.iter().map(|&k| c.state[k]).collect()).collect();
    let targets: Vec<f64> = chosen.iter().map(|c| c.ai_dose - c.physician_dose).collect();
    let mean_offset = targets.iter().sum::<f64>() / targets.len() as f64;
    let centred: Vec<f64> = targets.iter().map(|t| t - mean_offset).collect();
    let mut best: Option<(GridOptimum, f64)> = None;
    for nugget in COMPENSATION_NUGGETS {
        let opt = fit_hyperparams(&inputs, &centred, grid, nugget)?;
        if best.as_ref().is_none_or(|(b, _)| opt.objective > b.objective) {
            best = Some((opt, nugget));
        }
    }
    let (opt, nugget) = best.expect("at least one nugget candidate");
    CompensationModel::build(
        variables.iter().map(|(_, n)| n.clone()).collect(),
        dims,
        inputs,
        targets,
        mean_offset,
        opt.kernel,
        nugget,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub var1: f64,
    pub var2: f64,
    pub delta: f64,
}

/// Compensation lattice in original units, row-major over `var1` then `var2`,
/// with the training cases as markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationMap {
    pub var1: String,
    pub var2: String,
    pub resolution: usize,
    pub var1_values: Vec<f64>,
    pub var2_values: Vec<f64>,
    pub cells: Vec<MapCell>,
    pub training: Vec<MapCell>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Evaluate the compensation model on a `resolution × resolution` lattice
/// spanning the training range of two of its variables. Any other model
/// variables are held at their training mean.
pub fn compensation_map(
    model: &CompensationModel,
    scaling: &Scaling,
    var1: &str,
    var2: &str,
    resolution: usize,
) -> Result<CompensationMap, DecisionError> {
    if resolution == 0 || resolution > 1000 {
        return Err(DecisionError::Invalid(format!("resolution {resolution} must be in 1..=1000")));
    }
    let pos = |name: &str| {
        model
            .variables
            .iter()
            .position(|v| v.eq_ignore_ascii_case(name))
            .ok_or_else(|| DecisionError::UnknownVariable(name.to_string()))
    };
    let (i1, i2) = (pos(var1)?, pos(var2)?);
    let range = |i: usize| {
        let vals = model.inputs.iter().map(|x| x[i]);
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (lo1, hi1) = range(i1);
    let (lo2, hi2) = range(i2);
    let xs = linspace(lo1, hi1, resolution);
    let ys = linspace(lo2, hi2, resolution);
    let n = model.inputs.len() as f64;
    let base: Vec<f64> = (0..model.dims.len())
        .map(|k| model.inputs.iter().map(|x| x[k]).sum::<f64>() / n)
        .collect();
    let unscale = |i: usize, v: f64| scaling.unscale_value(model.dims[i], v);
    let mut cells = Vec::with_capacity(resolution * resolution);
    for &a in &xs {
        for &b in &ys {
            let mut x = base.clone();
            x[i1] = a;
            x[i2] = b;
            cells.push(MapCell {
                var1: unscale(i1, a),
                var2: unscale(i2, b),
                delta: model.predict(&x)?.0,
            });
        }
    }
    let training = model
        .inputs
        .iter()
        .zip(&model.targets)
        .map(|(x, &t)| MapCell {
            var1: unscale(i1, x[i1]),
            var2: unscale(i2, x[i2]),
            delta: t,
        })
        .collect();
    Ok(CompensationMap {
        var1: model.variables[i1].clone(),
        var2: model.variables[i2].clone(),
        resolution,
        var1_values: xs.iter().map(|&v| unscale(i1, v)).collect(),
        var2_values: ys.iter().map(|&v| unscale(i2, v)).collect(),
        cells,
        training,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::OutcomeMoments;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Outcome probabilities as explicit functions of the dose.
    struct Toy<F: Fn(f64) -> (f64, f64) + Sync> {
        f: F,
        logit_var: f64,
    }

    impl<F: Fn(f64) -> (f64, f64) + Sync> OutcomeModel for Toy<F> {
        fn outcomes(&self, _state: &[f64], dose: f64) -> Result<OutcomeDistribution, DecisionError> {
            let (a, b) = (self.f)(dose);
            Ok(OutcomeDistribution {
                lc: OutcomeMoments::from_logit(a, self.logit_var),
                rp2: OutcomeMoments::from_logit(b, self.logit_var),
            })
        }
    }

    fn rewards_from(mean: f64, spread: f64, n: usize, seed: u64) -> RewardDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RewardDistribution::from_samples((0..n).map(|_| mean + spread * (rng.random::<f64>() - 0.5)).collect(), seed)
    }

    #[test]
    fn default_grid_has_36_points() {
        let p = DoseGrid::default().points().unwrap();
        assert_eq!(p.len(), 36);
        assert!((p[35] - 5.0).abs() < 1e-12);
        assert_eq!(DoseGrid::single(2.0).points().unwrap(), vec![2.0]);
        assert!(DoseGrid { min: 0.0, max: 1.0, step: 0.1 }.validate().is_err());
        assert!(DoseGrid { min: 1.0, max: 2e4, step: 1.0 }.validate().is_err());
    }

    #[test]
    fn flat_model_picks_lowest_dose() {
        let m = Toy { f: |_| (1.0, -1.0), logit_var: 0.1 };
        let (d, curve) = optimize_dose(&m, &[], &DoseGrid::default(), &RewardParams::default()).unwrap();
        assert_eq!(d, 1.5);
        assert_eq!(curve.points.len(), 36);
    }

    #[test]
    fn unimodal_reward_peaks_at_known_dose() {
        // LC rises with dose, RP2 rises faster above 2.8.
        let m = Toy {
            f: |d: f64| (3.0 * (d - 1.5), 4.0 * (d - 2.8) - 1.0),
            logit_var: 0.0,
        };
        let params = RewardParams::default();
        let grid = DoseGrid::default();
        let (d, curve) = optimize_dose(&m, &[], &grid, &params).unwrap();
        // exhaustive oracle over a fine grid of the same function
        let fine: Vec<f64> = (0..=3500).map(|i| 1.5 + i as f64 * 0.001).collect();
        let truth = fine
            .iter()
            .copied()
            .max_by(|a, b| {
                let r = |x: f64| {
                    let (a, b) = (m.f)(x);
                    params.reward(crate::outcome::sigmoid(a), crate::outcome::sigmoid(b))
                };
                r(*a).partial_cmp(&r(*b)).unwrap()
            })
            .unwrap();
        let nearest = grid
            .points()
            .unwrap()
            .into_iter()
            .min_by(|a, b| (a - truth).abs().partial_cmp(&(b - truth).abs()).unwrap())
            .unwrap();
        assert!((d - nearest).abs() < 1e-12, "{d} vs {truth}");
        assert!(curve.points.iter().all(|p| p.reward_low <= p.reward && p.reward <= p.reward_high));
    }

    #[test]
    fn equal_doses_keep_physician() {
        let m = Toy {
            f: |d: f64| (2.0 * (d - 1.5), 2.0 * (d - 4.0)),
            logit_var: 0.5,
        };
        let cfg = DecisionConfig::default();
        let (ai, _) = optimize_dose(&m, &[], &cfg.grid, &cfg.reward).unwrap();
        let v = compare_prescriptions(&m, &[], ai, &cfg, 7).unwrap();
        assert_eq!(v.ai_reward.samples, v.physician_reward.samples);
        assert!(v.p_value >= 0.49);
        assert_eq!(v.chosen, Choice::Physician);
    }

    #[test]
    fn physician_dose_outside_grid_is_rejected() {
        let m = Toy { f: |_| (0.0, 0.0), logit_var: 0.0 };
        let err = compare_prescriptions(&m, &[], 6.0, &DecisionConfig::default(), 1).unwrap_err();
        assert!(matches!(err, DecisionError::DoseOutOfBounds { .. }));
    }

    #[test]
    fn clearly_better_ai_is_chosen() {
        let a = rewards_from(1.0, 0.1, 1000, 1);
        let b = rewards_from(1.0 - 10.0 * 0.1 / 12f64.sqrt(), 0.1, 1000, 2);
        let w = welch_one_sided(&a, &b);
        let se = (a.std.powi(2) / 1000.0 + b.std.powi(2) / 1000.0).sqrt();
        assert!((w.t - (a.mean - b.mean) / se).abs() < 1e-9);
        assert!(w.p_value < 1e-6);
    }

    #[test]
    fn zero_variance_conventions() {
        let c = |m: f64| RewardDistribution::from_samples(vec![m; 10], 0);
        assert_eq!(welch_one_sided(&c(1.0), &c(1.0)).p_value, 1.0);
        assert_eq!(welch_one_sided(&c(2.0), &c(1.0)).p_value, 0.0);
        assert_eq!(welch_one_sided(&c(0.0), &c(1.0)).p_value, 1.0);
    }

    #[test]
    fn welch_matches_closed_form_df() {
        let a = RewardDistribution::from_samples(vec![1.0, 2.0, 3.0, 4.0], 0);
        let b = RewardDistribution::from_samples(vec![0.5, 0.7, 0.9], 0);
        let (va, vb) = (a.std.powi(2) / 4.0, b.std.powi(2) / 3.0);
        let df = (va + vb).powi(2) / (va * va / 3.0 + vb * vb / 2.0);
        let w = welch_one_sided(&a, &b);
        assert!((w.df - df).abs() < 1e-12);
    }

    #[test]
    fn compensation_needs_three_qualifying_cases() {
        let cases: Vec<CompensationCase> = (0..5)
            .map(|i| CompensationCase {
                state: vec![i as f64 / 5.0, 0.5],
                ai_dose: 3.0,
                physician_dose: 2.5,
                p_value: if i < 2 { 0.01 } else { 0.2 },
            })
            .collect();
        let vars = vec![(0, "a".to_string()), (1, "b".to_string())];
        let err = fit_compensation(&cases, &vars, &GridSpec::default(), 0.05).unwrap_err();
        assert_eq!(err, DecisionError::InsufficientCases { qualifying: 2 });
        assert!(err.to_string().contains("insufficient AI-superior cases"));
    }

    fn scaling2() -> Scaling {
        use crate::cohort::{DoseBounds, VariableScaling};
        Scaling {
            variables: vec![
                VariableScaling {
                    name: "a".into(),
                    constant: false,
                    cap: None,
                    min: 10.0,
                    max: 20.0,
                },
                VariableScaling {
                    name: "b".into(),
                    constant: false,
                    cap: None,
                    min: 0.0,
                    max: 2.0,
                },
            ],
            dose_bounds: DoseBounds::default(),
        }
    }

    #[test]
    fn constant_shift_is_recovered_and_mapped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cases: Vec<CompensationCase> = (0..12)
            .map(|i| CompensationCase {
                state: vec![rng.random::<f64>(), rng.random::<f64>()],
                ai_dose: 3.0,
                physician_dose: 2.5,
                p_value: if i % 4 == 3 { 0.3 } else { 0.001 },
            })
            .collect();
        let vars = vec![(0, "a".to_string()), (1, "b".to_string())];
        let m = fit_compensation(&cases, &vars, &GridSpec::default(), 0.05).unwrap();
        assert_eq!(m.inputs.len(), 9);
        for c in &cases {
            assert!((m.predict_state(&c.state).unwrap().0 - 0.5).abs() < 1e-9);
        }
        let map = compensation_map(&m, &scaling2(), "a", "b", 2).unwrap();
        assert_eq!(map.cells.len(), 4);
        let lo = m.inputs.iter().map(|x| x[0]).fold(f64::INFINITY, f64::min);
        assert!((map.cells[0].var1 - (10.0 + 10.0 * lo)).abs() < 1e-12);
        assert_eq!(map.training.len(), 9);
        assert!(compensation_map(&m, &scaling2(), "a", "zzz", 2).is_err());
    }

    #[test]
    fn map_values_match_model_at_lattice_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases: Vec<CompensationCase> = (0..15)
            .map(|_| {
                let s = vec![rng.random::<f64>(), rng.random::<f64>()];
                CompensationCase {
                    ai_dose: 2.5 + s[0] - 0.5 * s[1],
                    physician_dose: 2.5,
                    state: s,
                    p_value: 0.0,
                }
            })
            .collect();
        let vars = vec![(0, "a".to_string()), (1, "b".to_string())];
        let m = fit_compensation(&cases, &vars, &GridSpec::default(), 0.05).unwrap();
        let map = compensation_map(&m, &scaling2(), "a", "b", 3).unwrap();
        for cell in &map.cells {
            let x = [(cell.var1 - 10.0) / 10.0, cell.var2 / 2.0];
            assert!((m.predict(&x).unwrap().0 - cell.delta).abs() < 1e-9);
        }
        let back: CompensationModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn welch_swap_is_complementary(ma in -1.0f64..1.0, mb in -1.0f64..1.0, sa in 0.01f64..1.0, sb in 0.01f64..1.0, seed in 0u64..50) {
            let a = rewards_from(ma, sa, 30, seed);
            let b = rewards_from(mb, sb, 40, seed + 1);
            let p = welch_one_sided(&a, &b).p_value;
            let q = welch_one_sided(&b, &a).p_value;
            prop_assert!((p + q - 1.0).abs() < 1e-10);
        }

        #[test]
        fn argmax_invariant_under_affine_maps(v in prop::collection::vec(-5.0f64..5.0, 1..40), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
            let w: Vec<f64> = v.iter().map(|x| scale * x + shift).collect();
            let (i, j) = (argmax_first(&v).unwrap(), argmax_first(&w).unwrap());
            prop_assert!(i == j || w[i] == w[j]);
        }

        #[test]
        fn choice_follows_p_value(shift in -0.2f64..0.2, seed in 0u64..20) {
            let m = Toy { f: move |d: f64| (2.0 * (d - 1.5) + shift, 1.5 * (d - 3.5)), logit_var: 0.3 };
            let v = compare_prescriptions(&m, &[], 2.0, &DecisionConfig { samples: 200, ..DecisionConfig::default() }, seed).unwrap();
            prop_assert_eq!(v.chosen == Choice::Ai, v.p_value < 0.05);
        }
    }
}
