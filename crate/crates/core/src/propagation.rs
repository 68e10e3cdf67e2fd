//! Pushes transition uncertainty through the outcome classifiers and turns
//! outcome probabilities into reward distributions.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::outcome::{sigmoid, EvaluationModel, Outcome, OutcomeError};
use crate::transition::StatePrediction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error(transparent)]
    Outcome(#[from] OutcomeError),
    #[error("state has {got} dimensions, evaluation model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least 2 Monte-Carlo samples, got {0}")]
    TooFewSamples(usize),
    #[error("probability {0} is outside [0, 1]")]
    Probability(f64),
}

/// Form of the error-in-variables kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EivVariant {
    /// `prod_k 1/(1+4βσ²) exp(-d²/(1/β + 4σ²))`.
    #[default]
    Verbatim,
    /// `prod_k (1+2βσ²)^{-1/2} exp(-d²/(1/β + 2σ²))`, the Gaussian
    /// expectation of the SE kernel under input noise on one argument.
    Standard,
}

/// Error-in-variables kernel with per-dimension input variances. Dimensions
/// with zero variance contribute exactly the SE factor.
pub fn eiv_kernel(s: &[f64], t: &[f64], rates: &[f64], variances: &[f64]) -> f64 {
    eiv_kernel_with(EivVariant::Verbatim, s, t, rates, variances)
}

pub fn eiv_kernel_with(variant: EivVariant, s: &[f64], t: &[f64], rates: &[f64], variances: &[f64]) -> f64 {
    let c = match variant {
        EivVariant::Verbatim => 4.0,
        EivVariant::Standard => 2.0,
    };
    let mut exponent = 0.0;
    let mut prefactor = 1.0;
    for k in 0..rates.len() {
        let d = s[k] - t[k];
        let (b, v) = (rates[k], variances[k]);
        if v == 0.0 {
            exponent += b * d * d;
        } else {
            exponent += d * d / (1.0 / b + c * v);
            prefactor *= match variant {
                EivVariant::Verbatim => 1.0 / (1.0 + c * b * v),
                EivVariant::Standard => 1.0 / (1.0 + c * b * v).sqrt(),
            };
        }
    }
    prefactor * (-exponent).exp()
}

/// Latent mean and variance of one outcome's logit at an uncertain state.
pub fn propagate_one(
    state: &StatePrediction,
    model: &EvaluationModel,
    outcome: Outcome,
    variant: EivVariant,
) -> Result<(f64, f64), PropagationError> {
    if state.mean.len() != model.dim() || state.variance.len() != model.dim() {
        return Err(PropagationError::Dimension {
            expected: model.dim(),
            got: state.mean.len(),
        });
    }
    let c = model.classifier(outcome);
    let rates = &c.kernel.rates;
    let k = DVector::from_iterator(
        model.inputs.len(),
        model
            .inputs
            .iter()
            .map(|x| eiv_kernel_with(variant, &state.mean, x, rates, &state.variance)),
    );
    let kss = eiv_kernel_with(variant, &state.mean, &state.mean, rates, &state.variance);
    Ok(c.latent_from_row(&k, kss, model.laplace_variance)?)
}

/// Logit `(mean, variance)` for LC and RP2.
pub fn propagate(
    state: &StatePrediction,
    model: &EvaluationModel,
    variant: EivVariant,
) -> Result<[(f64, f64); 2], PropagationError> {
    Ok([
        propagate_one(state, model, Outcome::Lc, variant)?,
        propagate_one(state, model, Outcome::Rp2, variant)?,
    ])
}

/// First-order map of a normal logit to a probability:
/// `(σ(μ), [σ(μ)(1-σ(μ))]² Σ)`.
pub fn delta_method(logit_mean: f64, logit_variance: f64) -> (f64, f64) {
    let p = sigmoid(logit_mean);
    let d = p * (1.0 - p);
    (p, d * d * logit_variance.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMoments {
    pub logit_mean: f64,
    pub logit_variance: f64,
    pub prob_mean: f64,
    pub prob_variance: f64,
}

impl OutcomeMoments {
    pub fn from_logit(logit_mean: f64, logit_variance: f64) -> Self {
        let (prob_mean, prob_variance) = delta_method(logit_mean, logit_variance);
        OutcomeMoments {
            logit_mean,
            logit_variance,
            prob_mean,
            prob_variance,
        }
    }

    pub fn prob_sd(&self) -> f64 {
        self.prob_variance.sqrt()
    }

    /// `mean ± 2 sd`, clipped to `[0, 1]`.
    pub fn interval(&self) -> (f64, f64) {
        let sd = self.prob_sd();
        ((self.prob_mean - 2.0 * sd).max(0.0), (self.prob_mean + 2.0 * sd).min(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDistribution {
    pub lc: OutcomeMoments,
    pub rp2: OutcomeMoments,
}

impl OutcomeDistribution {
    pub fn get(&self, outcome: Outcome) -> &OutcomeMoments {
        match outcome {
            Outcome::Lc => &self.lc,
            Outcome::Rp2 => &self.rp2,
        }
    }
}

/// Propagate and apply the delta method for both outcomes.
pub fn outcome_distribution(
    state: &StatePrediction,
    model: &EvaluationModel,
    variant: EivVariant,
) -> Result<OutcomeDistribution, PropagationError> {
    let [lc, rp2] = propagate(state, model, variant)?;
    Ok(OutcomeDistribution {
        lc: OutcomeMoments::from_logit(lc.0, lc.1),
        rp2: OutcomeMoments::from_logit(rp2.0, rp2.1),
    })
}

/// Constants of the smoothed reward
/// `R = -scale·((1-p_lc)^e + (p_rp2/rp2_reference)^e)^{1/e} + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    pub scale: f64,
    pub exponent: f64,
    pub rp2_reference: f64,
    pub offset: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            scale: 10.0,
            exponent: 8.0,
            rp2_reference: 0.57,
            offset: 3.281,
        }
    }
}

impl RewardParams {
    pub fn reward(&self, p_lc: f64, p_rp2: f64) -> f64 {
        let a = (1.0 - p_lc).powf(self.exponent);
        let b = (p_rp2 / self.rp2_reference).powf(self.exponent);
        -self.scale * (a + b).powf(1.0 / self.exponent) + self.offset
    }

    /// Supremum of the reward, attained at `(1, 0)`.
    pub fn supremum(&self) -> f64 {
        self.offset
    }
}

/// Reward with the default protocol constants.
pub fn reward(p_lc: f64, p_rp2: f64) -> f64 {
    RewardParams::default().reward(p_lc, p_rp2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDistribution {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (divisor `N - 1`).
    pub std: f64,
    pub seed: u64,
    pub sample_count: usize,
}

impl RewardDistribution {
    pub fn from_samples(samples: Vec<f64>, seed: u64) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        RewardDistribution {
            samples,
            mean,
            std: var.sqrt(),
            seed,
            sample_count: n,
        }
    }
}

/// Draw `n` independent `(p_lc, p_rp2)` pairs from the two delta-method
/// normals, clamp each to `[0, 1]` and map them through the reward.
pub fn sample_reward(
    dist: &OutcomeDistribution,
    n: usize,
    seed: u64,
    params: &RewardParams,
) -> Result<RewardDistribution, PropagationError> {
    if n < 2 {
        return Err(PropagationError::TooFewSamples(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sl, sr) = (dist.lc.prob_sd(), dist.rp2.prob_sd());
    let samples = (0..n)
        .map(|_| {
            let zl: f64 = StandardNormal.sample(&mut rng);
            let zr: f64 = StandardNormal.sample(&mut rng);
            let pl = (dist.lc.prob_mean + sl * zl).clamp(0.0, 1.0);
            let pr = (dist.rp2.prob_mean + sr * zr).clamp(0.0, 1.0);
            params.reward(pl, pr)
        })
        .collect();
    Ok(RewardDistribution::from_samples(samples, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{se_kernel, SeKernel};
    use crate::outcome::predict_logit;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn eiv_reduces_to_se_at_zero_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let t: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let r: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..100.0)).collect();
            assert_eq!(eiv_kernel(&s, &t, &r, &[0.0; 5]), se_kernel(&s, &t, &r).unwrap());
        }
    }

    #[test]
    fn eiv_anchor() {
        assert!((eiv_kernel(&[0.3], &[0.3], &[1.0], &[0.25]) - 0.5).abs() < 1e-15);
        let std = eiv_kernel_with(EivVariant::Standard, &[0.3], &[0.3], &[1.0], &[0.25]);
        assert!((std - 1.0 / 1.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn delta_method_anchors() {
        assert_eq!(delta_method(0.0, 0.0), (0.5, 0.0));
        let (m, v) = delta_method(0.0, 0.16);
        assert_eq!(m, 0.5);
        assert!((v - 0.01).abs() < 1e-15);
        let (m, v) = delta_method(800.0, 1.0);
        assert_eq!(m, 1.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn reward_anchors() {
        assert_eq!(reward(1.0, 0.0), 3.281);
        assert!((reward(0.0, 0.0) + 6.719).abs() < 1e-12);
        assert!((reward(0.0, 0.57) - (-10.0 * 2f64.powf(0.125) + 3.281)).abs() < 1e-9);
        assert!((reward(0.0, 0.57) + 7.62408).abs() < 1e-5);
    }

    #[test]
    fn reward_is_monotone_on_lattice() {
        for i in 0..=100 {
            for j in 0..=100 {
                let (pl, pr) = (i as f64 / 100.0, j as f64 / 100.0);
                let r = reward(pl, pr);
                if i < 100 {
                    assert!(reward((i + 1) as f64 / 100.0, pr) >= r);
                }
                if j < 100 {
                    assert!(reward(pl, (j + 1) as f64 / 100.0) <= r);
                }
                if (i, j) != (100, 0) {
                    assert!(r < 3.281);
                }
            }
        }
    }

    fn toy_model() -> EvaluationModel {
        let x = vec![vec![0.1], vec![0.3], vec![0.55], vec![0.8], vec![0.95]];
        let kern = SeKernel::new(vec![6.0], 2.0).unwrap();
        EvaluationModel::with_kernels(x, (&[0, 1, 1, 0, 1], kern.clone()), (&[1, 0, 0, 1, 1], kern), 1e-8).unwrap()
    }

    #[test]
    fn zero_variance_collapses_to_predict_logit() {
        let m = toy_model();
        for s in [0.0, 0.2, 0.5, 0.77, 1.0] {
            let st = StatePrediction {
                mean: vec![s],
                variance: vec![0.0],
            };
            let [lc, rp2] = propagate(&st, &m, EivVariant::Verbatim).unwrap();
            let a = predict_logit(&m, Outcome::Lc, &[s]).unwrap();
            let b = predict_logit(&m, Outcome::Rp2, &[s]).unwrap();
            assert!((lc.0 - a.0).abs() < 1e-10 && (lc.1 - a.1).abs() < 1e-10);
            assert!((rp2.0 - b.0).abs() < 1e-10 && (rp2.1 - b.1).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let m = toy_model();
        let x: Vec<f64> = m.inputs.iter().map(|v| v[0]).collect();
        let (beta, lam) = (6.0, 2.0);
        let n = x.len();
        let kmat = DMatrix::from_fn(n, n, |i, j| {
            (-beta * (x[i] - x[j]).powi(2)).exp() + if i == j { 1e-8 } else { 0.0 }
        });
        let kinv = kmat.try_inverse().unwrap();
        let h = DVector::from_column_slice(&m.lc.fit.mode);
        let (mu, s2) = (0.42, 0.03);
        let eiv = |a: f64, b: f64| 1.0 / (1.0 + 4.0 * beta * s2) * (-(a - b).powi(2) / (1.0 / beta + 4.0 * s2)).exp();
        let kv = DVector::from_fn(n, |i, _| eiv(mu, x[i]));
        let mean = (kv.transpose() * &kinv * &h)[(0, 0)];
        let var = (eiv(mu, mu) - (kv.transpose() * &kinv * &kv)[(0, 0)]) / lam;
        let st = StatePrediction {
            mean: vec![mu],
            variance: vec![s2],
        };
        let (pm, pv) = propagate_one(&st, &m, Outcome::Lc, EivVariant::Verbatim).unwrap();
        assert!((pm - mean).abs() < 1e-8);
        assert!((pv - var.max(0.0)).abs() < 1e-8);
    }

    #[test]
    fn inflated_variance_attenuates_mean() {
        let m = toy_model();
        let at = |v: f64| {
            let st = StatePrediction {
                mean: vec![0.3],
                variance: vec![v],
            };
            propagate_one(&st, &m, Outcome::Lc, EivVariant::Verbatim).unwrap().0
        };
        let base = at(0.0);
        assert!(base.abs() > 0.1);
        assert!(at(0.05).abs() < base.abs());
        assert!(at(0.5).abs() < at(0.05).abs());
    }

    #[test]
    fn degenerate_samples_equal_plugin_reward() {
        let d = OutcomeDistribution {
            lc: OutcomeMoments::from_logit(1.0, 0.0),
            rp2: OutcomeMoments::from_logit(-1.0, 0.0),
        };
        let r = sample_reward(&d, 50, 3, &RewardParams::default()).unwrap();
        let plug = reward(d.lc.prob_mean, d.rp2.prob_mean);
        assert!(r.samples.iter().all(|&s| s == plug));
        assert!(r.std < 1e-12);
        assert!(sample_reward(&d, 1, 3, &RewardParams::default()).is_err());
    }

    #[test]
    fn sample_mean_agrees_with_plugin_at_small_variance() {
        let d = OutcomeDistribution {
            lc: OutcomeMoments {
                logit_mean: 0.0,
                logit_variance: 0.0,
                prob_mean: 0.95,
                prob_variance: 1e-4,
            },
            rp2: OutcomeMoments {
                logit_mean: 0.0,
                logit_variance: 0.0,
                prob_mean: 0.3,
                prob_variance: 1e-4,
            },
        };
        let n = 4000;
        let r = sample_reward(&d, n, 11, &RewardParams::default()).unwrap();
        // the rp2 term dominates here, where the reward is nearly linear
        let plug = reward(0.95, 0.3);
        assert!((r.mean - plug).abs() < 3.0 * r.std / (n as f64).sqrt());
        let again = sample_reward(&d, n, 11, &RewardParams::default()).unwrap();
        assert_eq!(r, again);
    }

    proptest! {
        #[test]
        fn eiv_bounded_by_se_and_decreasing(
            s in prop::collection::vec(0.0f64..1.0, 3),
            t in prop::collection::vec(0.0f64..1.0, 3),
            r in prop::collection::vec(0.01f64..100.0, 3),
            v in prop::collection::vec(0.0f64..1.0, 3),
            bump in 0.001f64..1.0,
        ) {
            // Per dim the ratio to the SE factor is exp(D y/(1+y)) / (1+y)
            // with D = beta d^2 and y = 4 beta sigma^2, which is <= 1 and
            // decreasing in y exactly when D <= 1.
            let near = s.iter().zip(&t).zip(&r).all(|((a, b), beta)| beta * (a - b).powi(2) <= 1.0);
            let se = se_kernel(&s, &t, &r).unwrap();
            let e = eiv_kernel(&s, &t, &r, &v);
            prop_assert!(e <= 1.0);
            let mut v2 = v.clone();
            v2[0] += bump;
            if near {
                prop_assert!(e <= se * (1.0 + 1e-12));
                prop_assert!(eiv_kernel(&s, &t, &r, &v2) <= e * (1.0 + 1e-12));
            }
            prop_assert!(eiv_kernel(&s, &s, &r, &v2) < eiv_kernel(&s, &s, &r, &v));
        }

        #[test]
        fn delta_variance_bound(mu in -20.0f64..20.0, var in 0.0f64..10.0) {
            let (p, pv) = delta_method(mu, var);
            prop_assert!(p > 0.0 && p < 1.0 || mu.abs() > 15.0);
            prop_assert!(pv >= 0.0 && pv <= var / 16.0 + 1e-12);
        }

        #[test]
        fn clamped_samples_stay_in_range(
            ml in 0.0f64..1.0, mr in 0.0f64..1.0, vl in 0.0f64..0.5, vr in 0.0f64..0.5, seed in 0u64..100
        ) {
            let d = OutcomeDistribution {
                lc: OutcomeMoments { logit_mean: 0.0, logit_variance: 0.0, prob_mean: ml, prob_variance: vl },
                rp2: OutcomeMoments { logit_mean: 0.0, logit_variance: 0.0, prob_mean: mr, prob_variance: vr },
            };
            let r = sample_reward(&d, 200, seed, &RewardParams::default()).unwrap();
            let lo = reward(0.0, 1.0);
            prop_assert!(r.samples.iter().all(|&x| x <= 3.281 && x >= lo));
        }
    }
}
