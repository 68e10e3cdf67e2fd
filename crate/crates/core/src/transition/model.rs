use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::predictor::active_dims;
use super::{PointPredictor, TransitionError, INPUT_SLACK};
use crate::cohort::ScaledCohort;
use crate::gp::{fit_hyperparams, kernel_row, GramMatrix, GridSpec, SeKernel};

/// GP discrepancy model for one non-constant output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DimCalibration {
    pub dim: usize,
    pub kernel: SeKernel,
    pub residuals: Vec<f64>,
    gram: GramMatrix,
    /// `K^{-1} r`.
    weights: DVector<f64>,
}

impl DimCalibration {
    fn build(dim: usize, kernel: SeKernel, residuals: Vec<f64>, inputs: &[Vec<f64>], jitter: f64) -> Result<Self, TransitionError> {
        let gram = GramMatrix::new(inputs, &kernel.rates, jitter)?;
        let weights = gram.solve(&DVector::from_column_slice(&residuals))?;
        Ok(DimCalibration {
            dim,
            kernel,
            residuals,
            gram,
            weights,
        })
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    /// Posterior mean and variance of the discrepancy at `x`.
    fn predict(&self, inputs: &[Vec<f64>], x: &[f64]) -> Result<(f64, f64), TransitionError> {
        let k = kernel_row(inputs, x, &self.kernel.rates);
        let mean = k.dot(&self.weights);
        let v = self.gram.forward(&k)?;
        let var = ((1.0 - v.norm_squared()) / self.kernel.precision).max(0.0);
        Ok((mean, var))
    }
}

/// Predictive distribution of the next-stage state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Point predictor plus per-dimension GP discrepancy, trained on pooled
/// transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransitionPayload", try_from = "TransitionPayload")]
pub struct TransitionModel {
    pub predictor: PointPredictor,
    pub inputs: Vec<Vec<f64>>,
    pub per_dim: Vec<DimCalibration>,
    pub constant_dims: Vec<usize>,
    pub jitter: f64,
    pub q: usize,
}

#[derive(Serialize, Deserialize)]
struct DimPayload {
    dim: usize,
    kernel: SeKernel,
    residuals: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransitionPayload {
    q: usize,
    jitter: f64,
    constant_dims: Vec<usize>,
    predictor: PointPredictor,
    inputs: Vec<Vec<f64>>,
    per_dim: Vec<DimPayload>,
}

impl From<TransitionModel> for TransitionPayload {
    fn from(m: TransitionModel) -> Self {
        TransitionPayload {
            q: m.q,
            jitter: m.jitter,
            constant_dims: m.constant_dims,
            predictor: m.predictor,
            inputs: m.inputs,
            per_dim: m
                .per_dim
                .into_iter()
                .map(|d| DimPayload {
                    dim: d.dim,
                    kernel: d.kernel,
                    residuals: d.residuals,
                })
                .collect(),
        }
    }
}

impl TryFrom<TransitionPayload> for TransitionModel {
    type Error = TransitionError;

    fn try_from(p: TransitionPayload) -> Result<Self, Self::Error> {
        let per_dim = p
            .per_dim
            .into_iter()
            .map(|d| DimCalibration::build(d.dim, d.kernel, d.residuals, &p.inputs, p.jitter))
            .collect::<Result<_, _>>()?;
        Ok(TransitionModel {
            predictor: p.predictor,
            inputs: p.inputs,
            per_dim,
            constant_dims: p.constant_dims,
            jitter: p.jitter,
            q: p.q,
        })
    }
}

/// Calibrate `predictor` on the pooled transitions of `cohort`: one GP per
/// non-constant output over joint `(state, dose)` inputs, with hyperparameters
/// maximising the residual marginal likelihood over `grid`.
pub fn fit_transition(
    cohort: &ScaledCohort,
    predictor: PointPredictor,
    grid: &GridSpec,
    jitter: f64,
) -> Result<TransitionModel, TransitionError> {
    let pairs = cohort.transitions();
    if pairs.len() < 3 {
        return Err(TransitionError::Insufficient(format!(
            "{} pooled transitions; need at least 3",
            pairs.len()
        )));
    }
    let q = cohort.q();
    let active = active_dims(cohort);
    let constant_dims: Vec<usize> = (0..q).filter(|k| !active.contains(k)).collect();
    let inputs: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| x.clone()).collect();
    let etas: Vec<Vec<f64>> = inputs.iter().map(|x| predictor.predict(x)).collect::<Result<_, _>>()?;

    let per_dim: Vec<DimCalibration> = active
        .par_iter()
        .map(|&j| {
            let residuals: Vec<f64> = pairs.iter().zip(&etas).map(|((_, y), eta)| y[j] - eta[j]).collect();
            let opt = fit_hyperparams(&inputs, &residuals, grid, jitter)?;
            log::debug!(
                "transition dim {j}: rate {:?} precision {} objective {}",
                opt.kernel.rates.first(),
                opt.kernel.precision,
                opt.objective
            );
            DimCalibration::build(j, opt.kernel, residuals, &inputs, jitter)
        })
        .collect::<Result<_, _>>()?;

    Ok(TransitionModel {
        predictor,
        inputs,
        per_dim,
        constant_dims,
        jitter,
        q,
    })
}

impl TransitionModel {
    /// Point-predictor output only (no calibration).
    pub fn predict_point(&self, state: &[f64], dose: f64) -> Result<Vec<f64>, TransitionError> {
        let x = self.checked_input(state, dose)?;
        self.predictor.predict(&x)
    }

    fn checked_input(&self, state: &[f64], dose: f64) -> Result<Vec<f64>, TransitionError> {
        if state.len() != self.q {
            return Err(TransitionError::Dimension {
                expected: self.q,
                got: state.len(),
            });
        }
        let mut x = state.to_vec();
        x.push(dose);
        for (index, &value) in x.iter().enumerate() {
            let is_constant = index < self.q && self.constant_dims.contains(&index);
            if !is_constant && !(-INPUT_SLACK..=1.0 + INPUT_SLACK).contains(&value) {
                return Err(TransitionError::OutOfRange { index, value });
            }
        }
        Ok(x)
    }
}

/// Predictive mean and variance of `s_{T+1}` given scaled `state` and `dose`.
pub fn predict_next_state(model: &TransitionModel, state: &[f64], dose: f64) -> Result<StatePrediction, TransitionError> {
    let x = model.checked_input(state, dose)?;
    let mut mean = model.predictor.predict(&x)?;
    let mut variance = vec![0.0; model.q];
    for &k in &model.constant_dims {
        mean[k] = state[k];
    }
    for d in &model.per_dim {
        let (m, v) = d.predict(&model.inputs, &x)?;
        mean[d.dim] += m;
        variance[d.dim] = v;
    }
    Ok(StatePrediction { mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::transition::{AffinePredictor, PredictorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_predictor(q: usize, active: Vec<usize>) -> PointPredictor {
        let m = active.len();
        PointPredictor::Affine(AffinePredictor::new(q, active, vec![vec![0.0; q + 1]; m], vec![0.0; m]).unwrap())
    }

    #[test]
    fn perfect_predictor_gives_zero_bias() {
        let c = synth::random_scaled_cohort(12, 1);
        let mut c2 = c.clone();
        for i in 0..c.n() {
            for t in 1..3 {
                let x = c2.joint_input(t - 1, i);
                for j in 0..9 {
                    c2.states[t][i][j] = 0.2 + 0.5 * x[j] + 0.1 * x[12];
                }
            }
        }
        let p = fit_point_predictor_linear(&c2);
        let m = fit_transition(&c2, p.clone(), &GridSpec::default(), 1e-8).unwrap();
        for (x, _) in c2.transitions() {
            let pred = predict_next_state(&m, &x[..12], x[12]).unwrap();
            let eta = p.predict(&x).unwrap();
            for j in 0..9 {
                assert!((pred.mean[j] - eta[j]).abs() < 1e-6);
            }
        }
        assert_eq!(m.per_dim.len(), 9);
        assert_eq!(m.constant_dims, vec![9, 10, 11]);
    }

    fn fit_point_predictor_linear(c: &ScaledCohort) -> PointPredictor {
        crate::transition::fit_point_predictor(c, &PredictorConfig::Linear { ridge: 1e-10 }).unwrap()
    }

    #[test]
    fn interpolates_training_points() {
        let c = synth::random_scaled_cohort(10, 2);
        let p = zero_predictor(12, (0..9).collect());
        let m = fit_transition(&c, p, &GridSpec::single(3.0, 2.0), 1e-10).unwrap();
        for (x, y) in c.transitions() {
            let pred = predict_next_state(&m, &x[..12], x[12]).unwrap();
            for j in 0..9 {
                assert!((pred.mean[j] - y[j]).abs() < 1e-6, "{} vs {}", pred.mean[j], y[j]);
                assert!(pred.variance[j] < 1e-6);
            }
        }
    }

    #[test]
    fn far_queries_revert_to_prior() {
        let c = synth::random_scaled_cohort(10, 3);
        let p = zero_predictor(12, (0..9).collect());
        let m = fit_transition(&c, p, &GridSpec::single(100.0, 2.0), 1e-8).unwrap();
        // corner of the cube far from every point under a large rate
        let mut s = vec![1.1; 12];
        s[9] = 0.0;
        s[10] = 1.0;
        s[11] = 0.0;
        let pred = predict_next_state(&m, &s, -0.1).unwrap();
        for j in 0..9 {
            assert!(pred.mean[j].abs() < 1e-8);
            assert!((pred.variance[j] - 0.5).abs() < 1e-8);
        }
        for k in 9..12 {
            assert_eq!(pred.mean[k], s[k]);
            assert_eq!(pred.variance[k], 0.0);
        }
    }

    #[test]
    fn rejects_unscaled_inputs() {
        let c = synth::random_scaled_cohort(6, 4);
        let m = fit_transition(&c, zero_predictor(12, (0..9).collect()), &GridSpec::single(1.0, 1.0), 1e-8).unwrap();
        let s = vec![0.5; 12];
        assert!(matches!(
            predict_next_state(&m, &s, 2.5),
            Err(TransitionError::OutOfRange { index: 12, .. })
        ));
        let mut bad = s.clone();
        bad[4] = 35.0;
        assert!(matches!(
            predict_next_state(&m, &bad, 0.5),
            Err(TransitionError::OutOfRange { index: 4, .. })
        ));
    }

    #[test]
    fn variance_bounded_by_prior_and_monotone_in_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for rep in 0..5 {
            let c = synth::random_scaled_cohort(14, 10 + rep);
            let small = c.subset(&(0..7).collect::<Vec<_>>());
            let grid = GridSpec::single(2.0, 3.0);
            let full = fit_transition(&c, zero_predictor(12, (0..9).collect()), &grid, 1e-8).unwrap();
            let part = fit_transition(&small, zero_predictor(12, (0..9).collect()), &grid, 1e-8).unwrap();
            for _ in 0..20 {
                let mut s: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
                for k in 9..12 {
                    s[k] = 0.0;
                }
                let a = rng.random::<f64>();
                let pf = predict_next_state(&full, &s, a).unwrap();
                let pp = predict_next_state(&part, &s, a).unwrap();
                for j in 0..9 {
                    assert!(pf.variance[j] >= 0.0 && pf.variance[j] <= 1.0 / 3.0 + 1e-10);
                    assert!(pf.variance[j] <= pp.variance[j] + 1e-8);
                }
            }
        }
    }

    #[test]
    fn calibration_removes_injected_bias() {
        let truth = synth::SyntheticTruth::default();
        let train = truth.generate_scaled(80, 21);
        let test = truth.generate_scaled(30, 22);
        // predictor knows only the linear part
        let p = PointPredictor::Affine(truth.linear_part());
        let m = fit_transition(&train, p.clone(), &GridSpec::default(), 1e-8).unwrap();
        let mut better = 0;
        for j in 0..9 {
            let (mut e_eta, mut e_gp) = (0.0, 0.0);
            for (x, y) in test.transitions() {
                let eta = p.predict(&x).unwrap();
                let pred = predict_next_state(&m, &x[..12], x[12]).unwrap();
                e_eta += (eta[j] - y[j]).powi(2);
                e_gp += (pred.mean[j] - y[j]).powi(2);
            }
            if e_gp < 0.5 * e_eta {
                better += 1;
            }
        }
        assert!(better >= 7, "{better}");
    }

    #[test]
    fn linear_truth_is_covered_by_predictive_band() {
        let truth = synth::SyntheticTruth {
            bias_amplitude: 0.0,
            ..synth::SyntheticTruth::default()
        };
        let train = truth.generate_scaled(50, 31);
        let test = truth.generate_scaled(50, 32);
        let p = fit_point_predictor_linear(&train);
        let m = fit_transition(&train, p, &GridSpec::default(), 1e-8).unwrap();
        let mut covered = 0;
        let mut total = 0;
        for (x, y) in test.transitions().into_iter().take(100) {
            let pred = predict_next_state(&m, &x[..12], x[12]).unwrap();
            let j = total % 9;
            let sd = pred.variance[j].sqrt();
            if (pred.mean[j] - y[j]).abs() <= 2.0 * sd + 1e-9 {
                covered += 1;
            }
            total += 1;
        }
        assert!(covered * 10 >= total * 9, "{covered}/{total}");
    }

    #[test]
    fn serde_round_trip_predicts_identically() {
        let c = synth::random_scaled_cohort(10, 7);
        let m = fit_transition(&c, fit_point_predictor_linear(&c), &GridSpec::default(), 1e-8).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: TransitionModel = serde_json::from_str(&text).unwrap();
        let s = c.states[2][3].clone();
        let a = predict_next_state(&m, &s, 0.4).unwrap();
        let b = predict_next_state(&back, &s, 0.4).unwrap();
        assert_eq!(a, b);
    }
}
