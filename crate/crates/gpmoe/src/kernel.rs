//! Isotropic squared-exponential covariance function.
//!
//! `k(a, b) = signal_variance * exp(-||a - b||^2 / (2 lengthscale^2))`
//!
//! Hyperparameters are stored as logs so that positivity never has to be
//! enforced by the optimizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    log_lengthscale: f64,
    log_signal_variance: f64,
}

/// Partial derivatives of a kernel value with respect to the log
/// hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct KernelGrad {
    pub d_log_lengthscale: f64,
    pub d_log_signal_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscale: f64, signal_variance: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::invalid(format!(
                "lengthscale must be positive and finite, got {lengthscale}"
            )));
        }
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "signal variance must be positive and finite, got {signal_variance}"
            )));
        }
        Ok(Self {
            log_lengthscale: lengthscale.ln(),
            log_signal_variance: signal_variance.ln(),
        })
    }

    pub fn from_logs(log_lengthscale: f64, log_signal_variance: f64) -> Self {
        Self { log_lengthscale, log_signal_variance }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn log_lengthscale(&self) -> f64 {
        self.log_lengthscale
    }

    pub fn log_signal_variance(&self) -> f64 {
        self.log_signal_variance
    }

    /// Covariance between two points of equal dimension.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::invalid(format!(
                "kernel eval dimension mismatch: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        Ok(self.eval_sq_dist(sq_dist(a, b)))
    }

    /// Covariance value given a precomputed squared distance.
    #[inline]
    pub fn eval_sq_dist(&self, sq_dist: f64) -> f64 {
        let ell2 = (2.0 * self.log_lengthscale).exp();
        self.signal_variance() * (-0.5 * sq_dist / ell2).exp()
    }

    /// Covariance and its gradient with respect to the log hyperparameters.
    pub fn eval_with_grad(&self, a: &[f64], b: &[f64]) -> Result<(f64, KernelGrad)> {
        let value = self.eval(a, b)?;
        let ell2 = (2.0 * self.log_lengthscale).exp();
        let grad = KernelGrad {
            d_log_lengthscale: value * sq_dist(a, b) / ell2,
            d_log_signal_variance: value,
        };
        Ok((value, grad))
    }

    /// Cross-covariance matrix between the rows of `a` (n x d) and `b` (m x d).
    pub fn matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.ncols() != b.ncols() {
            return Err(Error::invalid(format!(
                "kernel matrix dimension mismatch: {} vs {} columns",
                a.ncols(),
                b.ncols()
            )));
        }
        let ell2 = (2.0 * self.log_lengthscale).exp();
        let s = self.signal_variance();
        let mut out = DMatrix::zeros(a.nrows(), b.nrows());
        for j in 0..b.nrows() {
            for i in 0..a.nrows() {
                let d2 = crate::linalg::row_sq_dist(a, i, b, j);
                out[(i, j)] = s * (-0.5 * d2 / ell2).exp();
            }
        }
        Ok(out)
    }

    /// Diagonal of the self-covariance matrix; constant for a stationary kernel.
    pub fn diag(&self, a: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_element(a.nrows(), self.signal_variance())
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
