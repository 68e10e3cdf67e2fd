//! Evaluation function: two GP classifiers (local control and pneumonitis)
//! over predicted final states, fitted with the Laplace approximation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{grid_search, kernel_row, GpError, GramMatrix, GridOptimum, GridSpec, SeKernel};

pub const NEWTON_TOLERANCE: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 20;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OutcomeError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("Newton iteration did not converge in {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
    #[error("labels must be 0 or 1 (index {index} is {value})")]
    NonBinaryLabel { index: usize, value: u8 },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("need at least 2 samples, got {0}")]
    TooFew(usize),
}

/// Binary outcome handled by the evaluation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Local control (desired).
    Lc,
    /// Grade 2+ radiation pneumonitis (adverse).
    Rp2,
}

impl Outcome {
    pub const ALL: [Outcome; 2] = [Outcome::Lc, Outcome::Rp2];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Lc => "lc",
            Outcome::Rp2 => "rp2",
        }
    }
}

pub fn sigmoid(h: f64) -> f64 {
    if h >= 0.0 {
        1.0 / (1.0 + (-h).exp())
    } else {
        let e = h.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^h)` without overflow.
fn softplus(h: f64) -> f64 {
    if h > 0.0 {
        h + (-h).exp().ln_1p()
    } else {
        h.exp().ln_1p()
    }
}

fn bernoulli_loglik(h: &DVector<f64>, y: &DVector<f64>) -> f64 {
    h.iter().zip(y.iter()).map(|(h, y)| y * h - softplus(*h)).sum()
}

/// Result of the Newton search for the posterior mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceFit {
    /// Latent mode `Ĥ`.
    pub mode: Vec<f64>,
    /// `σ(ĥ)(1 - σ(ĥ))` at the mode.
    pub w: Vec<f64>,
    /// `Ψ` at the mode.
    pub psi: f64,
    /// `log |I + W^½ (K/λ) W^½|` at the mode.
    pub log_det_b: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// `Ψ` after every accepted Newton step, starting from `h = 0`.
    pub psi_trace: Vec<f64>,
}

impl LaplaceFit {
    /// Approximate log marginal likelihood with the `1/λ` prior on the
    /// precision: `Ψ(Ĥ) - ½ log|B| - log λ`.
    pub fn objective(&self, precision: f64) -> f64 {
        self.psi - 0.5 * self.log_det_b - precision.ln()
    }
}

fn check_labels(labels: &[u8]) -> Result<DVector<f64>, OutcomeError> {
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| v > 1) {
        return Err(OutcomeError::NonBinaryLabel { index, value });
    }
    Ok(DVector::from_iterator(labels.len(), labels.iter().map(|&v| v as f64)))
}

/// Laplace fit with kernel correlations over `inputs`.
pub fn laplace_fit(inputs: &[Vec<f64>], labels: &[u8], kernel: &SeKernel, jitter: f64) -> Result<LaplaceFit, OutcomeError> {
    if inputs.len() != labels.len() {
        return Err(OutcomeError::Length(format!("{} inputs, {} labels", inputs.len(), labels.len())));
    }
    let gram = GramMatrix::new(inputs, &kernel.rates, jitter)?;
    laplace_fit_gram(&gram, labels, kernel.precision)
}

/// Newton iteration on `Ψ(h) = Σ log p(y_i | h_i) - (λ/2) hᵀK⁻¹h` with
/// prior covariance `C = K/λ`, tracked through `a = C⁻¹h` so `K` is never
/// inverted. Steps are halved while `Ψ` would decrease.
pub fn laplace_fit_gram(gram: &GramMatrix, labels: &[u8], precision: f64) -> Result<LaplaceFit, OutcomeError> {
    let n = gram.n();
    if n != labels.len() {
        return Err(OutcomeError::Length(format!("Gram is {n}x{n}, {} labels", labels.len())));
    }
    let y = check_labels(labels)?;
    let c = gram.entries() / precision;
    let psi_of = |h: &DVector<f64>, a: &DVector<f64>| bernoulli_loglik(h, &y) - 0.5 * a.dot(h);

    let mut h = DVector::<f64>::zeros(n);
    let mut a = DVector::<f64>::zeros(n);
    let mut psi = psi_of(&h, &a);
    let mut trace = vec![psi];
    let mut iterations = 0;
    loop {
        let pi = h.map(sigmoid);
        let grad = &y - &pi - &a;
        let gnorm = grad.norm();
        let w = pi.map(|p| p * (1.0 - p));
        let sw = w.map(f64::sqrt);
        let b_mat = DMatrix::from_fn(n, n, |i, j| sw[i] * c[(i, j)] * sw[j] + if i == j { 1.0 } else { 0.0 });
        let bf = GramMatrix::from_matrix(b_mat, 0.0)?;
        if gnorm < NEWTON_TOLERANCE {
            return Ok(LaplaceFit {
                mode: h.iter().copied().collect(),
                w: w.iter().copied().collect(),
                psi,
                log_det_b: bf.log_det(),
                iterations,
                gradient_norm: gnorm,
                psi_trace: trace,
            });
        }
        if iterations == NEWTON_MAX_ITER {
            return Err(OutcomeError::NotConverged {
                iterations,
                gradient_norm: gnorm,
            });
        }
        iterations += 1;

        let b = w.component_mul(&h) + (&y - &pi);
        let cb = &c * &b;
        let inner = bf.solve(&sw.component_mul(&cb))?;
        let a_new = &b - sw.component_mul(&inner);
        let da = a_new - &a;
        let dh = &c * &da;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let h_try = &h + step * &dh;
            let a_try = &a + step * &da;
            let psi_try = psi_of(&h_try, &a_try);
            if psi_try >= psi {
                h = h_try;
                a = a_try;
                psi = psi_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Near the mode the ascent can drop below rounding in Ψ; the full
            // Newton step is then still trusted.
            if gnorm > 1e-6 {
                return Err(OutcomeError::NotConverged {
                    iterations,
                    gradient_norm: gnorm,
                });
            }
            h += &dh;
            a += &da;
            psi = psi_of(&h, &a);
        }
        trace.push(psi);
    }
}

/// Grid search for classifier hyperparameters under the Laplace objective.
pub fn fit_eval_hyperparams(inputs: &[Vec<f64>], labels: &[u8], grid: &GridSpec, jitter: f64) -> Result<GridOptimum, OutcomeError> {
    if inputs.len() < 2 {
        return Err(OutcomeError::TooFew(inputs.len()));
    }
    if inputs.len() != labels.len() {
        return Err(OutcomeError::Length(format!("{} inputs, {} labels", inputs.len(), labels.len())));
    }
    check_labels(labels)?;
    let dim = inputs[0].len();
    Ok(grid_search(dim, grid, |rates, precisions| {
        let Ok(g) = GramMatrix::new(inputs, rates, jitter) else {
            return vec![None; precisions.len()];
        };
        precisions
            .iter()
            .map(|&lam| laplace_fit_gram(&g, labels, lam).ok().map(|f| f.objective(lam)))
            .collect()
    })?)
}

/// One fitted classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub kernel: SeKernel,
    pub labels: Vec<u8>,
    pub fit: LaplaceFit,
    gram: GramMatrix,
    /// `K⁻¹ Ĥ`.
    alpha: DVector<f64>,
    /// Factor of `B = I + W^½ (K/λ) W^½`, used by the corrected variance.
    b_factor: GramMatrix,
}

impl Classifier {
    pub fn train(inputs: &[Vec<f64>], labels: &[u8], kernel: SeKernel, jitter: f64) -> Result<Self, OutcomeError> {
        let gram = GramMatrix::new(inputs, &kernel.rates, jitter)?;
        let fit = laplace_fit_gram(&gram, labels, kernel.precision)?;
        Self::assemble(kernel, labels.to_vec(), fit, gram)
    }

    fn assemble(kernel: SeKernel, labels: Vec<u8>, fit: LaplaceFit, gram: GramMatrix) -> Result<Self, OutcomeError> {
        let n = gram.n();
        let alpha = gram.solve(&DVector::from_column_slice(&fit.mode))?;
        let sw: Vec<f64> = fit.w.iter().map(|w| w.sqrt()).collect();
        let c = gram.entries();
        let b = DMatrix::from_fn(n, n, |i, j| {
            sw[i] * c[(i, j)] * sw[j] / kernel.precision + if i == j { 1.0 } else { 0.0 }
        });
        let b_factor = GramMatrix::from_matrix(b, 0.0)?;
        Ok(Classifier {
            kernel,
            labels,
            fit,
            gram,
            alpha,
            b_factor,
        })
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    /// `K⁻¹ Ĥ`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Posterior precision `Λ = λK⁻¹ + W`.
    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        let mut m = self.gram.inverse() * self.kernel.precision;
        for (i, w) in self.fit.w.iter().enumerate() {
            m[(i, i)] += w;
        }
        m
    }

    /// Latent mean and variance at `s` using kernel correlations `k` against
    /// the training inputs and self-correlation `kss`.
    pub fn latent_from_row(&self, k: &DVector<f64>, kss: f64, laplace_variance: bool) -> Result<(f64, f64), OutcomeError> {
        let mean = k.dot(&self.alpha);
        let lam = self.kernel.precision;
        let var = if laplace_variance {
            let sw = DVector::from_iterator(k.len(), self.fit.w.iter().map(|w| w.sqrt()));
            let v = self.b_factor.forward(&sw.component_mul(k))?;
            kss / lam - v.norm_squared() / (lam * lam)
        } else {
            let v = self.gram.forward(k)?;
            (kss - v.norm_squared()) / lam
        };
        Ok((mean, var.max(0.0)))
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierPayload {
    kernel: SeKernel,
    labels: Vec<u8>,
    mode: Vec<f64>,
}

/// The two outcome classifiers sharing the predicted final-state inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "EvaluationPayload", try_from = "EvaluationPayload")]
pub struct EvaluationModel {
    pub inputs: Vec<Vec<f64>>,
    pub lc: Classifier,
    pub rp2: Classifier,
    pub jitter: f64,
    /// Use the Laplace-corrected latent variance instead of the plain GP
    /// variance.
    pub laplace_variance: bool,
}

#[derive(Serialize, Deserialize)]
struct EvaluationPayload {
    jitter: f64,
    laplace_variance: bool,
    inputs: Vec<Vec<f64>>,
    lc: ClassifierPayload,
    rp2: ClassifierPayload,
}

impl From<EvaluationModel> for EvaluationPayload {
    fn from(m: EvaluationModel) -> Self {
        let pack = |c: Classifier| ClassifierPayload {
            kernel: c.kernel,
            labels: c.labels,
            mode: c.fit.mode,
        };
        EvaluationPayload {
            jitter: m.jitter,
            laplace_variance: m.laplace_variance,
            inputs: m.inputs,
            lc: pack(m.lc),
            rp2: pack(m.rp2),
        }
    }
}

impl TryFrom<EvaluationPayload> for EvaluationModel {
    type Error = OutcomeError;

    /// Rebuild the cached factorizations. The stored mode is refined by the
    /// same Newton iteration, which starts from zero, so the restored model is
    /// identical to the trained one.
    fn try_from(p: EvaluationPayload) -> Result<Self, Self::Error> {
        let unpack = |c: ClassifierPayload| -> Result<Classifier, OutcomeError> {
            let cl = Classifier::train(&p.inputs, &c.labels, c.kernel, p.jitter)?;
            if cl.fit.mode.len() != c.mode.len() || cl.fit.mode.iter().zip(&c.mode).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(OutcomeError::Length("stored latent mode does not match refit".into()));
            }
            Ok(cl)
        };
        Ok(EvaluationModel {
            lc: unpack(p.lc)?,
            rp2: unpack(p.rp2)?,
            inputs: p.inputs,
            jitter: p.jitter,
            laplace_variance: p.laplace_variance,
        })
    }
}

impl EvaluationModel {
    /// Fit both classifiers, selecting each one's hyperparameters on `grid`.
    pub fn fit(inputs: Vec<Vec<f64>>, lc: &[u8], rp2: &[u8], grid: &GridSpec, jitter: f64) -> Result<Self, OutcomeError> {
        let fits: Vec<Result<Classifier, OutcomeError>> = [lc, rp2]
            .par_iter()
            .map(|labels| {
                let opt = fit_eval_hyperparams(&inputs, labels, grid, jitter)?;
                Classifier::train(&inputs, labels, opt.kernel, jitter)
            })
            .collect();
        let mut it = fits.into_iter();
        let lc = it.next().expect("two fits")?;
        let rp2 = it.next().expect("two fits")?;
        Ok(EvaluationModel {
            inputs,
            lc,
            rp2,
            jitter,
            laplace_variance: false,
        })
    }

    /// Fit both classifiers with fixed kernels.
    pub fn with_kernels(inputs: Vec<Vec<f64>>, lc: (&[u8], SeKernel), rp2: (&[u8], SeKernel), jitter: f64) -> Result<Self, OutcomeError> {
        let lc = Classifier::train(&inputs, lc.0, lc.1, jitter)?;
        let rp2 = Classifier::train(&inputs, rp2.0, rp2.1, jitter)?;
        Ok(EvaluationModel {
            inputs,
            lc,
            rp2,
            jitter,
            laplace_variance: false,
        })
    }

    pub fn classifier(&self, outcome: Outcome) -> &Classifier {
        match outcome {
            Outcome::Lc => &self.lc,
            Outcome::Rp2 => &self.rp2,
        }
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// Latent mean `k(s, Ŝ)ᵀ K⁻¹ Ĥ` and variance `(1/λ)(1 - k(s, Ŝ)ᵀ K⁻¹ k(Ŝ, s))`.
pub fn predict_logit(model: &EvaluationModel, outcome: Outcome, s: &[f64]) -> Result<(f64, f64), OutcomeError> {
    if s.len() != model.dim() {
        return Err(GpError::DimensionMismatch {
            expected: model.dim(),
            got: s.len(),
        }
        .into());
    }
    let c = model.classifier(outcome);
    let k = kernel_row(&model.inputs, s, &c.kernel.rates);
    c.latent_from_row(&k, 1.0, model.laplace_variance)
}

/// Summed binary cross-entropy with probabilities clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn cross_entropy(probs: &[f64], labels: &[u8]) -> Result<f64, OutcomeError> {
    if probs.len() != labels.len() {
        return Err(OutcomeError::Length(format!("{} probabilities, {} labels", probs.len(), labels.len())));
    }
    check_labels(labels)?;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

/// In-sample cross-entropy of classifiers fed GP-calibrated states against
/// the same classifiers fed point-predictor states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierDiagnostics {
    pub cross_entropy: f64,
    pub probabilities: Vec<f64>,
    pub baseline_cross_entropy: f64,
    pub baseline_probabilities: Vec<f64>,
}

impl ClassifierDiagnostics {
    pub fn compute(probabilities: Vec<f64>, baseline_probabilities: Vec<f64>, labels: &[u8]) -> Result<Self, OutcomeError> {
        Ok(ClassifierDiagnostics {
            cross_entropy: cross_entropy(&probabilities, labels)?,
            baseline_cross_entropy: cross_entropy(&baseline_probabilities, labels)?,
            probabilities,
            baseline_probabilities,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn single_point_mode_matches_bisection() {
        let k = SeKernel::new(vec![1.0], 1.0).unwrap();
        let fit = laplace_fit(&[vec![0.0]], &[1], &k, 0.0).unwrap();
        let oracle = bisect(|h| (1.0 - 1.0 / (1.0 + (-h as f64).exp())) - h, 0.0, 1.0);
        assert!((fit.mode[0] - oracle).abs() < 1e-9);
        assert!((fit.mode[0] - 0.40106).abs() < 1e-5);
        assert!(fit.w[0] > 0.0 && fit.w[0] <= 0.25);
    }

    #[test]
    fn symmetric_inputs_give_antisymmetric_mode() {
        let k = SeKernel::new(vec![1.0], 2.0).unwrap();
        let x = vec![vec![-0.5], vec![0.5]];
        let fit = laplace_fit(&x, &[0, 1], &k, 1e-8).unwrap();
        assert!((fit.mode[0] + fit.mode[1]).abs() < 1e-12);
        assert!(fit.mode[1] > 0.0);
    }

    #[test]
    fn huge_precision_pins_mode_to_zero() {
        let x = vec![vec![0.1], vec![0.4], vec![0.9]];
        let k = SeKernel::new(vec![1.0], 1e9).unwrap();
        let fit = laplace_fit(&x, &[1, 0, 1], &k, 1e-8).unwrap();
        assert!(fit.mode.iter().all(|h| h.abs() < 1e-8));
    }

    #[test]
    fn flipping_labels_negates_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y: Vec<u8> = (0..8).map(|i| (i % 3 == 0) as u8).collect();
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let k = SeKernel::new(vec![3.0, 3.0], 0.5).unwrap();
        let a = laplace_fit(&x, &y, &k, 1e-8).unwrap();
        let b = laplace_fit(&x, &flipped, &k, 1e-8).unwrap();
        for (p, q) in a.mode.iter().zip(&b.mode) {
            assert!((p + q).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_binary_labels() {
        let k = SeKernel::new(vec![1.0], 1.0).unwrap();
        assert!(matches!(
            laplace_fit(&[vec![0.0], vec![1.0]], &[1, 2], &k, 1e-8),
            Err(OutcomeError::NonBinaryLabel { index: 1, value: 2 })
        ));
    }

    /// Dense predictive equations written out independently.
    #[test]
    fn predict_logit_matches_dense_oracle() {
        let x = vec![vec![0.1], vec![0.35], vec![0.6], vec![0.95]];
        let y = [0u8, 1, 1, 0];
        let kern = SeKernel::new(vec![4.0], 2.5).unwrap();
        let model = EvaluationModel::with_kernels(x.clone(), (&y, kern.clone()), (&y, kern.clone()), 1e-8).unwrap();
        let n = x.len();
        let mut kmat = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                kmat[(i, j)] = (-4.0 * (x[i][0] - x[j][0]).powi(2)).exp() + if i == j { 1e-8 } else { 0.0 };
            }
        }
        let kinv = kmat.clone().try_inverse().unwrap();
        let h = DVector::from_column_slice(&model.lc.fit.mode);
        for s in [0.0, 0.22, 0.5, 0.8, 1.0] {
            let kv = DVector::from_fn(n, |i, _| (-4.0 * (x[i][0] - s).powi(2)).exp());
            let mean = (kv.transpose() * &kinv * &h)[(0, 0)];
            let var = (1.0 - (kv.transpose() * &kinv * &kv)[(0, 0)]) / 2.5;
            let (m, v) = predict_logit(&model, Outcome::Lc, &[s]).unwrap();
            assert!((m - mean).abs() < 1e-8, "{m} {mean}");
            assert!((v - var.max(0.0)).abs() < 1e-8, "{v} {var}");
        }
    }

    #[test]
    fn predict_logit_interpolates_and_reverts() {
        let x = vec![vec![0.1], vec![0.5], vec![0.9]];
        let y = [1u8, 0, 1];
        let kern = SeKernel::new(vec![20.0], 4.0).unwrap();
        let model = EvaluationModel::with_kernels(x.clone(), (&y, kern.clone()), (&y, kern), 1e-12).unwrap();
        for (i, xi) in x.iter().enumerate() {
            let (m, v) = predict_logit(&model, Outcome::Lc, xi).unwrap();
            assert!((m - model.lc.fit.mode[i]).abs() < 1e-6);
            assert!(v < 1e-6);
        }
        let (m, v) = predict_logit(&model, Outcome::Rp2, &[40.0]).unwrap();
        assert!(m.abs() < 1e-12);
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn corrected_variance_is_larger() {
        let x = vec![vec![0.1], vec![0.5], vec![0.9]];
        let y = [1u8, 0, 1];
        let kern = SeKernel::new(vec![5.0], 1.0).unwrap();
        let mut model = EvaluationModel::with_kernels(x, (&y, kern.clone()), (&y, kern), 1e-8).unwrap();
        let (_, v0) = predict_logit(&model, Outcome::Lc, &[0.3]).unwrap();
        model.laplace_variance = true;
        let (_, v1) = predict_logit(&model, Outcome::Lc, &[0.3]).unwrap();
        assert!(v1 > v0);
        assert!(v1 <= 1.0 + 1e-10);
    }

    #[test]
    fn lambda_matrix_is_precision() {
        let x = vec![vec![0.2], vec![0.7]];
        let kern = SeKernel::new(vec![1.0], 3.0).unwrap();
        let m = EvaluationModel::with_kernels(x, (&[0, 1], kern.clone()), (&[1, 1], kern), 1e-8).unwrap();
        let lam = m.lc.lambda_matrix();
        let k = m.lc.gram().entries().clone();
        let back = (k * 3.0).try_inverse().unwrap();
        // Λ - W = λK⁻¹ = (K/λ)⁻¹
        let mut diff = lam.clone();
        for i in 0..2 {
            diff[(i, i)] -= m.lc.fit.w[i];
        }
        let kinv_lambda = back * 9.0;
        assert!((diff - kinv_lambda).norm() < 1e-6 * lam.norm());
    }

    #[test]
    fn cross_entropy_values() {
        let ce = cross_entropy(&[0.5; 6], &[0, 1, 0, 1, 1, 1]).unwrap();
        assert!((ce - 6.0 * 2f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(ce < 1e-11);
        assert!(cross_entropy(&[0.5], &[1, 0]).is_err());
    }

    #[test]
    fn grid_selection_is_exhaustive_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.random::<f64>()]).collect();
        let y: Vec<u8> = x.iter().map(|v| (v[0] > 0.5) as u8).collect();
        let grid = GridSpec {
            refine: false,
            ..GridSpec::default()
        };
        let opt = fit_eval_hyperparams(&x, &y, &grid, 1e-8).unwrap();
        let mut best = f64::NEG_INFINITY;
        for &r in &grid.rates {
            for &l in &grid.precisions {
                if let Ok(f) = laplace_fit(&x, &y, &SeKernel::new(vec![r], l).unwrap(), 1e-8) {
                    best = best.max(f.objective(l));
                }
            }
        }
        assert_eq!(opt.objective, best);
        let only = fit_eval_hyperparams(&x, &y, &GridSpec::single(1.0, 4.0), 1e-8).unwrap();
        assert_eq!(only.kernel.precision, 4.0);
    }

    #[test]
    fn serde_round_trip() {
        let x = vec![vec![0.1, 0.2], vec![0.5, 0.4], vec![0.9, 0.1]];
        let kern = SeKernel::new(vec![2.0, 1.0], 1.5).unwrap();
        let m = EvaluationModel::with_kernels(x, (&[1, 0, 1], kern.clone()), (&[0, 0, 1], kern), 1e-8).unwrap();
        let back: EvaluationModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn newton_is_monotone_and_variance_bounded(
            seed in 0u64..1000,
            lam in 0.05f64..50.0,
            rate in 0.1f64..30.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>()]).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
            let k = SeKernel::new(vec![rate], lam).unwrap();
            let fit = laplace_fit(&x, &y, &k, 1e-8).unwrap();
            for w in fit.psi_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
            prop_assert!(fit.gradient_norm < NEWTON_TOLERANCE);
            prop_assert!(fit.w.iter().all(|&w| w > 0.0 && w <= 0.25));
            let m = EvaluationModel::with_kernels(x, (&y, k.clone()), (&y, k), 1e-8).unwrap();
            let (_, v) = predict_logit(&m, Outcome::Lc, &[rng.random::<f64>()]).unwrap();
            prop_assert!(v >= 0.0 && v <= 1.0 / lam + 1e-10);
        }
    }
}
