use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::GpError;

/// Squared-exponential kernel parameters: one rate per input dimension and a
/// precision. The covariance is `correlation(x, x') / precision`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub rates: Vec<f64>,
    pub precision: f64,
}

impl SeKernel {
    pub fn new(rates: Vec<f64>, precision: f64) -> Result<Self, GpError> {
        if rates.is_empty() {
            return Err(GpError::InvalidParams("no rates".into()));
        }
        if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(GpError::InvalidParams(format!("rate {r} must be positive and finite")));
        }
        if !(precision.is_finite() && precision > 0.0) {
            return Err(GpError::InvalidParams(format!(
                "precision {precision} must be positive and finite"
            )));
        }
        Ok(SeKernel { rates, precision })
    }

    pub fn isotropic(dim: usize, rate: f64, precision: f64) -> Result<Self, GpError> {
        SeKernel::new(vec![rate; dim], precision)
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    /// Kernel correlation `prod_k exp(-rate_k (x_k - y_k)^2)`, in `(0, 1]`.
    pub fn correlation(&self, x: &[f64], y: &[f64]) -> Result<f64, GpError> {
        se_kernel(x, y, &self.rates)
    }
}

/// `prod_k exp(-rates_k (x_k - y_k)^2)`.
pub fn se_kernel(x: &[f64], y: &[f64], rates: &[f64]) -> Result<f64, GpError> {
    if x.len() != rates.len() {
        return Err(GpError::DimensionMismatch {
            expected: rates.len(),
            got: x.len(),
        });
    }
    if y.len() != rates.len() {
        return Err(GpError::DimensionMismatch {
            expected: rates.len(),
            got: y.len(),
        });
    }
    Ok(se_unchecked(x, y, rates))
}

#[inline]
pub(crate) fn se_unchecked(x: &[f64], y: &[f64], rates: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((a, b), r) in x.iter().zip(y).zip(rates) {
        let d = a - b;
        s += r * d * d;
    }
    (-s).exp()
}

/// Cross-correlations `k(points_i, x)` for every training point.
pub(crate) fn kernel_row(points: &[Vec<f64>], x: &[f64], rates: &[f64]) -> DVector<f64> {
    DVector::from_iterator(points.len(), points.iter().map(|p| se_unchecked(p, x, rates)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_distance_is_one() {
        let x = [0.3, 0.7, 0.1];
        assert_eq!(se_kernel(&x, &x, &[2.0, 5.0, 0.1]).unwrap(), 1.0);
    }

    #[test]
    fn flat_kernel_limit() {
        let v = se_kernel(&[0.0, 1.0], &[1.0, 0.0], &[1e-300, 1e-300]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn unit_rate_unit_offset() {
        let v = se_kernel(&[0.0, 0.5], &[1.0, 0.5], &[1.0, 1.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            se_kernel(&[0.0], &[0.0, 1.0], &[1.0, 1.0]),
            Err(GpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_nonpositive_params() {
        assert!(SeKernel::new(vec![1.0, 0.0], 1.0).is_err());
        assert!(SeKernel::new(vec![1.0], -1.0).is_err());
        assert!(SeKernel::new(vec![f64::NAN], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(x in proptest::collection::vec(-2.0f64..2.0, 3), y in proptest::collection::vec(-2.0f64..2.0, 3),
                                 r in proptest::collection::vec(1e-3f64..50.0, 3)) {
            let a = se_kernel(&x, &y, &r).unwrap();
            let b = se_kernel(&y, &x, &r).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(a > 0.0 || a == 0.0);
            prop_assert!(a <= 1.0);
        }
    }
}
