use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GpError, GramMatrix, SeKernel};

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}

/// Hyperparameter grid. Rates share one axis unless `anisotropic` is set, in
/// which case a coordinate pass over each input dimension follows the
/// isotropic search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub rates: Vec<f64>,
    pub precisions: Vec<f64>,
    #[serde(default)]
    pub anisotropic: bool,
    #[serde(default = "default_true")]
    pub refine: bool,
}

fn default_true() -> bool {
    true
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rates: log_spaced(1e-2, 1e2, 7),
            precisions: log_spaced(1e-1, 1e2, 7),
            anisotropic: false,
            refine: true,
        }
    }
}

impl GridSpec {
    pub fn single(rate: f64, precision: f64) -> Self {
        GridSpec {
            rates: vec![rate],
            precisions: vec![precision],
            anisotropic: false,
            refine: false,
        }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if self.rates.is_empty() || self.precisions.is_empty() {
            return Err(GpError::Search("empty grid".into()));
        }
        if self
            .rates
            .iter()
            .chain(&self.precisions)
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(GpError::Search("grid values must be positive and finite".into()));
        }
        Ok(())
    }

    fn rate_step(&self) -> Option<f64> {
        geometric_step(&self.rates)
    }

    fn precision_step(&self) -> Option<f64> {
        geometric_step(&self.precisions)
    }
}

fn geometric_step(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let s = (v[v.len() - 1] / v[0]).powf(1.0 / (v.len() - 1) as f64);
    (s > 1.0).then_some(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum {
    pub kernel: SeKernel,
    pub objective: f64,
    pub evaluations: usize,
}

struct Best {
    rates: Vec<f64>,
    precision: f64,
    objective: f64,
}

/// Evaluate `rates` candidates (in parallel) against every precision and
/// return the first strict maximum in candidate-major, precision-minor order.
fn best_of<F>(candidates: &[Vec<f64>], precisions: &[f64], eval: &F, count: &mut usize) -> Option<Best>
where
    F: Fn(&[f64], &[f64]) -> Vec<Option<f64>> + Sync,
{
    let results: Vec<Vec<Option<f64>>> = candidates.par_iter().map(|r| eval(r, precisions)).collect();
    *count += candidates.len() * precisions.len();
    let mut best: Option<Best> = None;
    for (r, vals) in candidates.iter().zip(results) {
        for (&p, v) in precisions.iter().zip(vals) {
            let Some(v) = v.filter(|v| v.is_finite()) else { continue };
            if best.as_ref().is_none_or(|b| v > b.objective) {
                best = Some(Best {
                    rates: r.clone(),
                    precision: p,
                    objective: v,
                });
            }
        }
    }
    best
}

/// Deterministic grid search over SE kernel hyperparameters.
///
/// `eval(rates, precisions)` returns the objective for each precision under the
/// given rates (`None` where evaluation failed, e.g. factorization). Grid
/// evaluations run in parallel; the reduction is always in grid index order,
/// so ties resolve to the smallest lexicographic index.
pub fn grid_search<F>(dim: usize, spec: &GridSpec, eval: F) -> Result<GridOptimum, GpError>
where
    F: Fn(&[f64], &[f64]) -> Vec<Option<f64>> + Sync,
{
    spec.validate()?;
    if dim == 0 {
        return Err(GpError::Search("zero input dimension".into()));
    }
    let mut evaluations = 0;
    let iso: Vec<Vec<f64>> = spec.rates.iter().map(|&r| vec![r; dim]).collect();
    let mut best = best_of(&iso, &spec.precisions, &eval, &mut evaluations)
        .ok_or_else(|| GpError::Search("every grid point failed to evaluate".into()))?;

    if spec.refine {
        if spec.anisotropic {
            for k in 0..dim {
                let cands: Vec<Vec<f64>> = spec
                    .rates
                    .iter()
                    .filter(|&&r| r != best.rates[k])
                    .map(|&r| {
                        let mut v = best.rates.clone();
                        v[k] = r;
                        v
                    })
                    .collect();
                if let Some(b) = best_of(&cands, &spec.precisions, &eval, &mut evaluations) {
                    if b.objective > best.objective {
                        best = b;
                    }
                }
            }
        } else if let (Some(rs), Some(ps)) = (spec.rate_step(), spec.precision_step()) {
            let (hr, hp) = (rs.sqrt(), ps.sqrt());
            let r0 = best.rates[0];
            let cands = vec![vec![r0 / hr; dim], vec![r0; dim], vec![r0 * hr; dim]];
            let precs = [best.precision / hp, best.precision, best.precision * hp];
            if let Some(b) = best_of(&cands, &precs, &eval, &mut evaluations) {
                if b.objective > best.objective {
                    best = b;
                }
            }
        }
    }

    Ok(GridOptimum {
        kernel: SeKernel::new(best.rates, best.precision)?,
        objective: best.objective,
        evaluations,
    })
}

/// Maximise the Gaussian log marginal likelihood of `targets` over the grid.
pub fn fit_hyperparams(
    inputs: &[Vec<f64>],
    targets: &[f64],
    spec: &GridSpec,
    jitter: f64,
) -> Result<GridOptimum, GpError> {
    let n = inputs.len();
    if n < 3 {
        return Err(GpError::Search(format!("need at least 3 samples, got {n}")));
    }
    if targets.len() != n {
        return Err(GpError::ShapeMismatch { n, rows: targets.len() });
    }
    let dim = inputs[0].len();
    let r = DVector::from_column_slice(targets);
    let log_2pi = (2.0 * std::f64::consts::PI).ln();
    grid_search(dim, spec, |rates, precisions| {
        let Ok(g) = GramMatrix::new(inputs, rates, jitter) else {
            return vec![None; precisions.len()];
        };
        let quad = g.forward(&r).map(|z| z.norm_squared()).unwrap_or(f64::NAN);
        let log_det = g.log_det();
        precisions
            .iter()
            .map(|&lam| {
                let v = -0.5 * lam * quad - 0.5 * (log_det - n as f64 * lam.ln()) - 0.5 * n as f64 * log_2pi;
                v.is_finite().then_some(v)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::log_marginal_likelihood;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn points(n: usize, d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| scale * rng.random::<f64>()).collect()).collect()
    }

    /// Draw from a zero-mean GP with the given SE rates and precision.
    fn sample_gp(x: &[Vec<f64>], rates: &[f64], precision: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let g = GramMatrix::new(x, rates, 1e-8).unwrap();
        let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = g.factor() * z / precision.sqrt();
        f.iter().copied().collect()
    }

    #[test]
    fn log_spacing() {
        let v = log_spaced(1e-2, 1e2, 7);
        assert_eq!(v.len(), 7);
        assert!((v[0] - 1e-2).abs() < 1e-15);
        assert!((v[3] - 1.0).abs() < 1e-12);
        assert!((v[6] - 1e2).abs() < 1e-10);
    }

    #[test]
    fn single_point_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = points(10, 2, 1.0, &mut rng);
        let y: Vec<f64> = x.iter().map(|p| p[0].sin()).collect();
        let opt = fit_hyperparams(&x, &y, &GridSpec::single(0.7, 3.0), 1e-8).unwrap();
        assert_eq!(opt.kernel.rates, vec![0.7, 0.7]);
        assert_eq!(opt.kernel.precision, 3.0);
    }

    #[test]
    fn picks_the_larger_of_two_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = points(12, 1, 1.0, &mut rng);
        let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin()).collect();
        let spec = GridSpec {
            rates: vec![0.05, 5.0],
            precisions: vec![2.0],
            anisotropic: false,
            refine: false,
        };
        let r = DVector::from_vec(y.clone());
        let lml = |rate: f64| {
            let g = GramMatrix::new(&x, &[rate], 1e-8).unwrap();
            log_marginal_likelihood(&r, &g, 2.0).unwrap()
        };
        let want = if lml(0.05) > lml(5.0) { 0.05 } else { 5.0 };
        let opt = fit_hyperparams(&x, &y, &spec, 1e-8).unwrap();
        assert_eq!(opt.kernel.rates[0], want);
        assert!((opt.objective - lml(want)).abs() < 1e-9);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let spec = GridSpec {
            rates: vec![1.0, 2.0, 3.0],
            precisions: vec![1.0, 2.0],
            anisotropic: false,
            refine: false,
        };
        let opt = grid_search(2, &spec, |_, p| vec![Some(0.0); p.len()]).unwrap();
        assert_eq!(opt.kernel.rates, vec![1.0, 1.0]);
        assert_eq!(opt.kernel.precision, 1.0);
    }

    #[test]
    fn all_failures_is_an_error() {
        let err = grid_search(1, &GridSpec::default(), |_, p| vec![None; p.len()]).unwrap_err();
        assert!(matches!(err, GpError::Search(_)));
    }

    #[test]
    fn too_few_samples() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(fit_hyperparams(&x, &[0.0, 1.0], &GridSpec::default(), 1e-8).is_err());
    }

    #[test]
    fn recovers_rate_two_from_gp_draws() {
        let grid = GridSpec {
            refine: false,
            ..GridSpec::default()
        };
        let mut hits = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = points(60, 2, 3.0, &mut rng);
            let y = sample_gp(&x, &[2.0, 2.0], 1.0, &mut rng);
            let opt = fit_hyperparams(&x, &y, &grid, 1e-8).unwrap();
            let step = (grid.rates[1] / grid.rates[0]).ln();
            if (opt.kernel.rates[0].ln() - 2f64.ln()).abs() <= step {
                hits += 1;
            }
        }
        assert!(hits >= 16, "{hits}/20 within one grid step");
    }

    #[test]
    fn anisotropic_pass_shrinks_irrelevant_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = points(50, 2, 1.0, &mut rng);
        let y: Vec<f64> = x.iter().map(|p| (2.0 * std::f64::consts::PI * p[0]).sin() / 4.0).collect();
        let spec = GridSpec {
            anisotropic: true,
            ..GridSpec::default()
        };
        let opt = fit_hyperparams(&x, &y, &spec, 1e-8).unwrap();
        assert!(opt.kernel.rates[1] < opt.kernel.rates[0], "{:?}", opt.kernel.rates);
    }

    #[test]
    fn forcing_a_noise_dimension_rate_up_lowers_likelihood() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let x = points(40, 2, 1.0, &mut rng);
            // Smooth in dim 0, independent of dim 1.
            let y: Vec<f64> = x.iter().map(|p| (1.5 * p[0]).sin()).collect();
            let r = DVector::from_vec(y);
            let lml = |rates: &[f64]| {
                let g = GramMatrix::new(&x, rates, 1e-8).unwrap();
                log_marginal_likelihood(&r, &g, 10.0).unwrap()
            };
            assert!(lml(&[1.0, 100.0]) < lml(&[1.0, 0.01]), "seed {seed}");
        }
    }

    #[test]
    fn refinement_never_worsens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = points(30, 3, 1.0, &mut rng);
        let y: Vec<f64> = x.iter().map(|p| p[0] * p[1] - p[2]).collect();
        let coarse = fit_hyperparams(&x, &y, &GridSpec { refine: false, ..GridSpec::default() }, 1e-8).unwrap();
        let fine = fit_hyperparams(&x, &y, &GridSpec::default(), 1e-8).unwrap();
        assert!(fine.objective >= coarse.objective);
    }
}
