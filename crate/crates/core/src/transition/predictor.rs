use std::io::Read;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TransitionError;
use crate::cohort::{CohortError, ScaledCohort};
use crate::gp::GramMatrix;

/// Bootstrap augmentation for the builtin network: resample training rows with
/// replacement and add Gaussian noise to their inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of resampled copies of the training set to append.
    pub copies: usize,
    pub noise_sd: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            copies: 1,
            noise_sd: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 32,
            epochs: 2000,
            learning_rate: 0.01,
            seed: 0,
            bootstrap: None,
        }
    }
}

/// How to obtain the point predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorConfig {
    /// One-hidden-layer tanh network trained full-batch.
    Mlp(MlpConfig),
    /// Ridge-regularised affine map.
    Linear { ridge: f64 },
    /// Precomputed predictions from an outside model, keyed by
    /// `(patient_id, stage)`.
    External { path: PathBuf },
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig::Mlp(MlpConfig::default())
    }
}

/// Point estimate of the next-stage state from a joint `(state, dose)` input.
/// Constant dimensions are always passed through from the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointPredictor {
    Mlp(Mlp),
    Affine(AffinePredictor),
    External(ExternalPredictions),
}

impl PointPredictor {
    /// Predict all q next-state values for the joint input `x` of length q+1.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, TransitionError> {
        let (q, active) = self.layout();
        if x.len() != q + 1 {
            return Err(TransitionError::Dimension {
                expected: q + 1,
                got: x.len(),
            });
        }
        let outputs = match self {
            PointPredictor::Mlp(m) => m.forward(x),
            PointPredictor::Affine(a) => a.forward(x),
            PointPredictor::External(e) => e.lookup(x)?,
        };
        let mut out = x[..q].to_vec();
        for (&j, v) in active.iter().zip(outputs) {
            out[j] = v;
        }
        Ok(out)
    }

    fn layout(&self) -> (usize, &[usize]) {
        match self {
            PointPredictor::Mlp(m) => (m.q, &m.active),
            PointPredictor::Affine(a) => (a.q, &a.active),
            PointPredictor::External(e) => (e.q, &e.active),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PointPredictor::Mlp(_) => "mlp",
            PointPredictor::Affine(_) => "affine",
            PointPredictor::External(_) => "external",
        }
    }
}

/// Fit the configured point predictor on all pooled transitions of `cohort`.
pub fn fit_point_predictor(cohort: &ScaledCohort, config: &PredictorConfig) -> Result<PointPredictor, TransitionError> {
    let (inputs, targets) = training_pairs(cohort);
    if inputs.len() < 2 {
        return Err(TransitionError::Insufficient(format!(
            "{} transitions; need at least 2",
            inputs.len()
        )));
    }
    let q = cohort.q();
    let active = active_dims(cohort);
    match config {
        PredictorConfig::Mlp(c) => Ok(PointPredictor::Mlp(Mlp::fit(&inputs, &targets, q, &active, c))),
        PredictorConfig::Linear { ridge } => Ok(PointPredictor::Affine(AffinePredictor::fit(
            &inputs, &targets, q, &active, *ridge,
        )?)),
        PredictorConfig::External { path } => {
            let f = std::fs::File::open(path)
                .map_err(|e| TransitionError::External(format!("{}: {e}", path.display())))?;
            Ok(PointPredictor::External(ExternalPredictions::from_csv(f, cohort)?))
        }
    }
}

pub(crate) fn active_dims(cohort: &ScaledCohort) -> Vec<usize> {
    (0..cohort.q()).filter(|&k| !cohort.scaling.variables[k].constant).collect()
}

fn training_pairs(cohort: &ScaledCohort) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    cohort.transitions().into_iter().unzip()
}

/// One-hidden-layer tanh network over the joint input, predicting the active
/// (non-constant) dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub q: usize,
    pub active: Vec<usize>,
    pub hidden: usize,
    /// `hidden x (q+1)`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `active x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Output pinned to a constant where the training targets were degenerate.
    pub constant_outputs: Vec<Option<f64>>,
}

impl Mlp {
    /// Deterministic full-batch training with Adam updates.
    pub fn fit(inputs: &[Vec<f64>], targets: &[Vec<f64>], q: usize, active: &[usize], config: &MlpConfig) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d_in = q + 1;
        let h = config.hidden.max(1);
        let m = active.len();

        let mut xs: Vec<Vec<f64>> = inputs.to_vec();
        let mut ys: Vec<Vec<f64>> = targets.iter().map(|t| active.iter().map(|&j| t[j]).collect()).collect();
        if let Some(b) = &config.bootstrap {
            let mut aug = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb005_7a9e);
            let noise = Normal::new(0.0, b.noise_sd.max(0.0)).expect("finite sd");
            let n0 = xs.len();
            for _ in 0..b.copies {
                for _ in 0..n0 {
                    let i = aug.random_range(0..n0);
                    let x: Vec<f64> = xs[i].iter().map(|v| v + noise.sample(&mut aug)).collect();
                    let y = ys[i].clone();
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        let n = xs.len();

        let constant_outputs: Vec<Option<f64>> = (0..m)
            .map(|o| {
                let first = ys[0][o];
                if ys.iter().all(|y| y[o] == first) {
                    log::warn!("transition target {} is constant; using a constant predictor", active[o]);
                    Some(first)
                } else {
                    None
                }
            })
            .collect();

        let a1 = (6.0 / (d_in + h) as f64).sqrt();
        let a2 = (6.0 / (h + m.max(1)) as f64).sqrt();
        let mut w1: Vec<f64> = (0..h * d_in).map(|_| rng.random_range(-a1..a1)).collect();
        let mut b1 = vec![0.0; h];
        let mut w2: Vec<f64> = (0..m * h).map(|_| rng.random_range(-a2..a2)).collect();
        let mut b2: Vec<f64> = (0..m).map(|o| ys.iter().map(|y| y[o]).sum::<f64>() / n as f64).collect();

        let mut params = [&mut w1, &mut b1, &mut w2, &mut b2];
        let mut adam: Vec<(Vec<f64>, Vec<f64>)> = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);

        let mut hid = vec![0.0; n * h];
        let mut grads: [Vec<f64>; 4] = [vec![0.0; h * d_in], vec![0.0; h], vec![0.0; m * h], vec![0.0; m]];
        let scale = 2.0 / (n * m.max(1)) as f64;
        for epoch in 1..=config.epochs {
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            let (w1, b1, w2, b2) = (&*params[0], &*params[1], &*params[2], &*params[3]);
            for (s, x) in xs.iter().enumerate() {
                let hs = &mut hid[s * h..(s + 1) * h];
                for u in 0..h {
                    let row = &w1[u * d_in..(u + 1) * d_in];
                    let z: f64 = b1[u] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                    hs[u] = z.tanh();
                }
                let mut dh = vec![0.0; h];
                for o in 0..m {
                    if constant_outputs[o].is_some() {
                        continue;
                    }
                    let row = &w2[o * h..(o + 1) * h];
                    let pred = b2[o] + row.iter().zip(hs.iter()).map(|(w, v)| w * v).sum::<f64>();
                    let err = scale * (pred - ys[s][o]);
                    grads[3][o] += err;
                    for u in 0..h {
                        grads[2][o * h + u] += err * hs[u];
                        dh[u] += err * row[u];
                    }
                }
                for u in 0..h {
                    let dz = dh[u] * (1.0 - hs[u] * hs[u]);
                    grads[1][u] += dz;
                    for i in 0..d_in {
                        grads[0][u * d_in + i] += dz * x[i];
                    }
                }
            }
            let bc1 = 1.0 - beta1.powi(epoch as i32);
            let bc2 = 1.0 - beta2.powi(epoch as i32);
            for (p, ((mom, vel), g)) in params.iter_mut().zip(adam.iter_mut().zip(grads.iter())) {
                for i in 0..p.len() {
                    mom[i] = beta1 * mom[i] + (1.0 - beta1) * g[i];
                    vel[i] = beta2 * vel[i] + (1.0 - beta2) * g[i] * g[i];
                    p[i] -= config.learning_rate * (mom[i] / bc1) / ((vel[i] / bc2).sqrt() + eps);
                }
            }
        }

        Mlp {
            q,
            active: active.to_vec(),
            hidden: h,
            w1,
            b1,
            w2,
            b2,
            constant_outputs,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let d_in = self.q + 1;
        let h = self.hidden;
        let hs: Vec<f64> = (0..h)
            .map(|u| {
                let row = &self.w1[u * d_in..(u + 1) * d_in];
                (self.b1[u] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        (0..self.active.len())
            .map(|o| match self.constant_outputs[o] {
                Some(c) => c,
                None => {
                    let row = &self.w2[o * h..(o + 1) * h];
                    self.b2[o] + row.iter().zip(&hs).map(|(w, v)| w * v).sum::<f64>()
                }
            })
            .collect()
    }
}

/// Affine map from the joint input to the active dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePredictor {
    pub q: usize,
    pub active: Vec<usize>,
    /// One row of length q+1 per active dimension.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl AffinePredictor {
    pub fn new(q: usize, active: Vec<usize>, weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self, TransitionError> {
        if weights.len() != active.len() || bias.len() != active.len() {
            return Err(TransitionError::Misaligned("one weight row and bias per active dimension".into()));
        }
        if let Some(w) = weights.iter().find(|w| w.len() != q + 1) {
            return Err(TransitionError::Dimension {
                expected: q + 1,
                got: w.len(),
            });
        }
        Ok(AffinePredictor { q, active, weights, bias })
    }

    /// Ridge least squares with an unpenalised intercept (inputs are centred).
    pub fn fit(
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        q: usize,
        active: &[usize],
        ridge: f64,
    ) -> Result<Self, TransitionError> {
        let n = inputs.len();
        let d = q + 1;
        let mean_x: Vec<f64> = (0..d).map(|i| inputs.iter().map(|x| x[i]).sum::<f64>() / n as f64).collect();
        let xc = DMatrix::from_fn(n, d, |r, c| inputs[r][c] - mean_x[c]);
        let xtx = xc.transpose() * &xc;
        let g = GramMatrix::from_matrix(xtx, ridge.max(1e-10))?;
        let mut weights = Vec::with_capacity(active.len());
        let mut bias = Vec::with_capacity(active.len());
        for &j in active {
            let mean_y = targets.iter().map(|t| t[j]).sum::<f64>() / n as f64;
            let yc = DVector::from_fn(n, |r, _| targets[r][j] - mean_y);
            let w = g.solve(&(xc.transpose() * yc))?;
            bias.push(mean_y - w.iter().zip(&mean_x).map(|(a, b)| a * b).sum::<f64>());
            weights.push(w.iter().copied().collect());
        }
        Ok(AffinePredictor {
            q,
            active: active.to_vec(),
            weights,
            bias,
        })
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEntry {
    pub patient_id: String,
    pub stage: usize,
    /// Scaled joint input the prediction belongs to.
    pub input: Vec<f64>,
    /// Scaled predictions for the active dimensions.
    pub output: Vec<f64>,
}

/// Predictions produced by an outside model, bound to the cohort's inputs.
/// Only inputs that appear in the cohort can be predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPredictions {
    pub q: usize,
    pub active: Vec<usize>,
    pub entries: Vec<ExternalEntry>,
}

impl ExternalPredictions {
    /// Parse a predictions file (`patient_id, stage, <active variables>`, in
    /// original units) and bind each row to the matching cohort input.
    pub fn from_csv<R: Read>(reader: R, cohort: &ScaledCohort) -> Result<Self, TransitionError> {
        let active = active_dims(cohort);
        let names: Vec<&str> = active.iter().map(|&k| cohort.scaling.variables[k].name.as_str()).collect();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| TransitionError::External(e.to_string()))?
            .clone();
        let col = |name: &str| -> Result<usize, TransitionError> {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| TransitionError::External(format!("missing column `{name}`")))
        };
        let id_col = col("patient_id")?;
        let stage_col = col("stage")?;
        let var_cols: Vec<usize> = names.iter().map(|n| col(n)).collect::<Result<_, _>>()?;
        if headers.len() != 2 + names.len() {
            return Err(TransitionError::External(format!(
                "expected {} columns, found {}",
                2 + names.len(),
                headers.len()
            )));
        }
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| TransitionError::External(e.to_string()))?;
            let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let parse_err = |column: &str, message: String| {
                TransitionError::Cohort(CohortError::Parse {
                    file: "predictions".into(),
                    row,
                    column: column.into(),
                    message,
                })
            };
            let id = rec.get(id_col).unwrap_or("").to_string();
            let i = cohort
                .patient_ids
                .iter()
                .position(|p| *p == id)
                .ok_or_else(|| parse_err("patient_id", format!("unknown patient `{id}`")))?;
            let stage: usize = rec
                .get(stage_col)
                .and_then(|s| s.parse().ok())
                .filter(|s| (1..=crate::STAGES).contains(s))
                .ok_or_else(|| parse_err("stage", "stage must be 1, 2 or 3".into()))?;
            let mut output = Vec::with_capacity(active.len());
            for ((&k, &c), name) in active.iter().zip(&var_cols).zip(&names) {
                let raw = rec.get(c).unwrap_or("");
                let v: f64 = raw
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| parse_err(name, format!("non-numeric value `{raw}`")))?;
                output.push(cohort.scaling.scale_value(k, v));
            }
            entries.push(ExternalEntry {
                patient_id: id,
                stage,
                input: cohort.joint_input(stage - 1, i),
                output,
            });
        }
        Ok(ExternalPredictions {
            q: cohort.q(),
            active,
            entries,
        })
    }

    fn lookup(&self, x: &[f64]) -> Result<Vec<f64>, TransitionError> {
        self.entries
            .iter()
            .find(|e| e.input.len() == x.len() && e.input.iter().zip(x).all(|(a, b)| a.to_bits() == b.to_bits()))
            .map(|e| e.output.clone())
            .ok_or(TransitionError::NoExternalPrediction)
    }
}
