use nalgebra::{DMatrix, DVector};

use super::kernel::se_unchecked;
use super::{GpError, SeKernel};

/// Lower Cholesky factor of a symmetric matrix. On failure returns the index
/// of the first non-positive pivot.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(j);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// A kernel Gram matrix with diagonal jitter and its cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    jitter: f64,
    factor: DMatrix<f64>,
}

impl GramMatrix {
    /// Build the SE-correlation Gram over `points` and factorize it.
    pub fn new(points: &[Vec<f64>], rates: &[f64], jitter: f64) -> Result<Self, GpError> {
        let n = points.len();
        if n == 0 {
            return Err(GpError::Empty);
        }
        for p in points {
            if p.len() != rates.len() {
                return Err(GpError::DimensionMismatch {
                    expected: rates.len(),
                    got: p.len(),
                });
            }
        }
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
            for j in 0..i {
                let v = se_unchecked(&points[i], &points[j], rates);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self::from_matrix(m, jitter)
    }

    /// Factorize an explicit symmetric matrix after adding `jitter` to its
    /// diagonal.
    pub fn from_matrix(mut entries: DMatrix<f64>, jitter: f64) -> Result<Self, GpError> {
        let n = entries.nrows();
        if n == 0 {
            return Err(GpError::Empty);
        }
        if entries.ncols() != n {
            return Err(GpError::ShapeMismatch { n, rows: entries.ncols() });
        }
        if !(jitter >= 0.0) {
            return Err(GpError::InvalidParams(format!("jitter {jitter} must be nonnegative")));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(GpError::InvalidParams(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
            entries[(i, i)] += jitter;
        }
        let factor = cholesky_lower(&entries).map_err(|pivot| GpError::NotPositiveDefinite { pivot })?;
        Ok(GramMatrix { entries, jitter, factor })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Entries including the diagonal jitter.
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular Cholesky factor L with `L L^T = entries`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `log |entries|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L^{-1} b`.
    pub fn forward(&self, b: &DVector<f64>) -> Result<DVector<f64>, GpError> {
        self.check_rows(b.len())?;
        let l = &self.factor;
        let n = self.n();
        let mut x = b.clone();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= l[(i, k)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        Ok(x)
    }

    /// `L^{-T} b`.
    pub fn backward(&self, b: &DVector<f64>) -> Result<DVector<f64>, GpError> {
        self.check_rows(b.len())?;
        let l = &self.factor;
        let n = self.n();
        let mut x = b.clone();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        Ok(x)
    }

    /// Solve `entries * x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>, GpError> {
        self.backward(&self.forward(b)?)
    }

    /// Solve `entries * X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>, GpError> {
        self.check_rows(b.nrows())?;
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve(&b.column(j).into_owned())?;
            out.set_column(j, &col);
        }
        Ok(out)
    }

    /// Explicit inverse of the jittered Gram.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.n(), self.n()))
            .expect("square identity matches Gram shape")
    }

    fn check_rows(&self, rows: usize) -> Result<(), GpError> {
        if rows != self.n() {
            return Err(GpError::ShapeMismatch { n: self.n(), rows });
        }
        Ok(())
    }
}

/// Gram matrix of `kernel` over `points` (precision is not applied).
pub fn gram(points: &[Vec<f64>], kernel: &SeKernel, jitter: f64) -> Result<GramMatrix, GpError> {
    GramMatrix::new(points, &kernel.rates, jitter)
}

/// Gaussian log marginal likelihood of `residuals` under covariance
/// `gram / precision`:
/// `-1/2 r^T (K/λ)^{-1} r - 1/2 log|K/λ| - n/2 log 2π`.
pub fn log_marginal_likelihood(residuals: &DVector<f64>, gram: &GramMatrix, precision: f64) -> Result<f64, GpError> {
    let n = gram.n();
    let z = gram.forward(residuals)?;
    let quad = precision * z.norm_squared();
    let log_det = gram.log_det() - n as f64 * precision.ln();
    Ok(-0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}
