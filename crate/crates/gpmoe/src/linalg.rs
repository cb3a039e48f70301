//! Small shared linear-algebra helpers built on nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093455_f64;

/// Cholesky factorization with escalating diagonal jitter.
///
/// Starts at `1e-8 * scale` and escalates by factors of 10 up to
/// `1e-4 * scale` before giving up. Returns the factorization and the
/// jitter that was actually applied.
pub fn cholesky_with_jitter(
    matrix: &DMatrix<f64>,
    scale: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    debug_assert_eq!(matrix.nrows(), matrix.ncols());
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let mut jitter = 1e-8 * scale;
    let max_jitter = 1e-4 * scale;
    loop {
        let mut jittered = matrix.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
        if jitter > max_jitter * (1.0 + 1e-12) {
            return Err(Error::numerical(format!(
                "Cholesky failed after jitter escalation up to {max_jitter:e}"
            )));
        }
    }
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("lower-triangular solve: non-singular by construction")
}

/// Solves `L^T X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("transposed lower-triangular solve: non-singular by construction")
}

pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("lower-triangular solve: non-singular by construction")
}

pub fn solve_lower_transpose_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("transposed lower-triangular solve: non-singular by construction")
}

/// `log det` of the factorized matrix, i.e. `2 * sum(log diag(L))`.
pub fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log density of `N(x | mean, Sigma)` given a Cholesky factor of `Sigma`.
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let centered = x - mean;
    let white = solve_lower_vec(&chol.l(), &centered);
    let n = x.len() as f64;
    -0.5 * (n * LN_2PI + log_det_from_cholesky(chol) + white.norm_squared())
}

/// Log density of a scalar Gaussian `N(y | mean, variance)`.
pub fn scalar_gaussian_log_density(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + variance.ln() + r * r / variance)
}

/// Squared Euclidean distance between two rows of (possibly different) matrices.
pub fn row_sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let d = a.ncols();
    let mut acc = 0.0;
    for c in 0..d {
        let diff = a[(i, c)] - b[(j, c)];
        acc += diff * diff;
    }
    acc
}

/// Mean of a slice; 0 for empty input.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance of a slice; 0 for fewer than two values.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}
