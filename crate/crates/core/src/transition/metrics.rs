use serde::{Deserialize, Serialize};

use super::predictor::active_dims;
use super::{fit_point_predictor, fit_transition, predict_next_state, PredictorConfig, TransitionError};
use crate::cohort::ScaledCohort;
use crate::gp::GridSpec;

/// Both readings of the relative-improvement score. `None` marks a zero
/// denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeImprovement {
    /// `sum (gp - dnn)^2 / sum (dnn - truth)^2`.
    pub verbatim: Option<f64>,
    /// `(dnn_mse - gp_mse) / dnn_mse`.
    pub standard: Option<f64>,
}

pub fn relative_improvement(dnn: &[f64], gp: &[f64], truth: &[f64]) -> Result<RelativeImprovement, TransitionError> {
    if dnn.len() != gp.len() || dnn.len() != truth.len() {
        return Err(TransitionError::Misaligned(format!(
            "dnn {}, gp {}, truth {}",
            dnn.len(),
            gp.len(),
            truth.len()
        )));
    }
    let shift: f64 = gp.iter().zip(dnn).map(|(g, d)| (g - d).powi(2)).sum();
    let dnn_se: f64 = dnn.iter().zip(truth).map(|(d, t)| (d - t).powi(2)).sum();
    let gp_se: f64 = gp.iter().zip(truth).map(|(g, t)| (g - t).powi(2)).sum();
    let ratio = |num: f64, den: f64| (den != 0.0).then(|| num / den);
    Ok(RelativeImprovement {
        verbatim: ratio(shift, dnn_se),
        standard: ratio(dnn_se - gp_se, dnn_se),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub variable: String,
    pub dnn_mse: f64,
    pub gp_mse: f64,
    pub verbatim_ri: Option<f64>,
    pub standard_ri: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub folds: usize,
    pub rows: Vec<CvRow>,
}

/// Held-out MSE of the point predictor alone and of the calibrated mean, per
/// non-constant dimension, pooled over every transition target of every fold.
pub fn cv_mse(
    cohort: &ScaledCohort,
    predictor: &PredictorConfig,
    grid: &GridSpec,
    jitter: f64,
    folds: &[Vec<usize>],
) -> Result<CvTable, TransitionError> {
    let active = active_dims(cohort);
    let mut dnn: Vec<Vec<f64>> = vec![Vec::new(); active.len()];
    let mut gp: Vec<Vec<f64>> = vec![Vec::new(); active.len()];
    let mut truth: Vec<Vec<f64>> = vec![Vec::new(); active.len()];
    // External files already hold out-of-fold predictions and are keyed by
    // patient, so they bind to the whole cohort once.
    let external = match predictor {
        PredictorConfig::External { .. } => Some(fit_point_predictor(cohort, predictor)?),
        _ => None,
    };
    for fold in folds {
        let train_idx: Vec<usize> = (0..cohort.n()).filter(|i| !fold.contains(i)).collect();
        let train = cohort.subset(&train_idx);
        let test = cohort.subset(fold);
        let p = match &external {
            Some(p) => p.clone(),
            None => fit_point_predictor(&train, predictor)?,
        };
        let model = fit_transition(&train, p, grid, jitter)?;
        for (x, y) in test.transitions() {
            let q = cohort.q();
            let eta = model.predictor.predict(&x)?;
            let pred = predict_next_state(&model, &x[..q], x[q])?;
            for (o, &j) in active.iter().enumerate() {
                dnn[o].push(eta[j]);
                gp[o].push(pred.mean[j]);
                truth[o].push(y[j]);
            }
        }
    }
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    let rows = active
        .iter()
        .enumerate()
        .map(|(o, &j)| {
            let ri = relative_improvement(&dnn[o], &gp[o], &truth[o])?;
            Ok(CvRow {
                variable: cohort.scaling.variables[j].name.clone(),
                dnn_mse: mse(&dnn[o], &truth[o]),
                gp_mse: mse(&gp[o], &truth[o]),
                verbatim_ri: ri.verbatim,
                standard_ri: ri.standard,
            })
        })
        .collect::<Result<_, TransitionError>>()?;
    Ok(CvTable { folds: folds.len(), rows })
}
