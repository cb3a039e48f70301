//! FITC sparse Gaussian-process expert.
//!
//! An expert carries a constant mean, squared-exponential kernel
//! hyperparameters, a noise variance, M pseudo-inputs and the pseudo-targets
//! at those locations. The training-conditional approximation replaces the
//! dense N x N covariance by
//!
//! `Q_N = K_NM K_MM^-1 K_MN + Lambda + noise * I`
//!
//! with `Lambda` the diagonal Schur complement, so the marginal likelihood,
//! its gradient, and all predictions cost O(N M^2) instead of O(N^3).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, ClusterConfig};
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::linalg::{
    cholesky_with_jitter, gaussian_log_density, solve_lower, solve_lower_transpose,
    solve_lower_transpose_vec, solve_lower_vec, LN_2PI,
};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGpExpert {
    /// Constant mean of the expert.
    pub mean: f64,
    pub kernel: KernelParams,
    log_noise_variance: f64,
    /// `M x d` pseudo-input locations.
    pub pseudo_inputs: DMatrix<f64>,
    /// Pseudo-target values at the pseudo-inputs.
    pub pseudo_targets: DVector<f64>,
}

impl SparseGpExpert {
    pub fn new(
        mean: f64,
        kernel: KernelParams,
        noise_variance: f64,
        pseudo_inputs: DMatrix<f64>,
        pseudo_targets: DVector<f64>,
    ) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "noise variance must be positive and finite, got {noise_variance}"
            )));
        }
        if pseudo_inputs.nrows() != pseudo_targets.len() || pseudo_inputs.nrows() == 0 {
            return Err(Error::invalid(format!(
                "{} pseudo-inputs for {} pseudo-targets",
                pseudo_inputs.nrows(),
                pseudo_targets.len()
            )));
        }
        Ok(Self {
            mean,
            kernel,
            log_noise_variance: noise_variance.ln(),
            pseudo_inputs,
            pseudo_targets,
        })
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn log_noise_variance(&self) -> f64 {
        self.log_noise_variance
    }

    pub fn set_log_noise_variance(&mut self, value: f64) {
        self.log_noise_variance = value;
    }

    pub fn num_inducing(&self) -> usize {
        self.pseudo_inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.pseudo_inputs.ncols()
    }

    /// Factorizes the inducing covariance for repeated predictions.
    pub fn predictor(&self) -> Result<ExpertPredictor> {
        let k_mm = self.kernel.matrix(&self.pseudo_inputs, &self.pseudo_inputs)?;
        let (chol, _) = cholesky_with_jitter(&k_mm, self.kernel.signal_variance())?;
        let l_k = chol.l();
        let centered = &self.pseudo_targets - DVector::from_element(self.num_inducing(), self.mean);
        let weights = solve_lower_transpose_vec(&l_k, &solve_lower_vec(&l_k, &centered));
        Ok(ExpertPredictor {
            mean: self.mean,
            kernel: self.kernel,
            noise_variance: self.noise_variance(),
            pseudo_inputs: self.pseudo_inputs.clone(),
            l_k,
            weights,
        })
    }
}

/// Cached factorization for pointwise prediction.
#[derive(Debug, Clone)]
pub struct ExpertPredictor {
    mean: f64,
    kernel: KernelParams,
    noise_variance: f64,
    pseudo_inputs: DMatrix<f64>,
    l_k: DMatrix<f64>,
    /// `K_MM^-1 (f~ - mean)`.
    weights: DVector<f64>,
}

impl ExpertPredictor {
    /// Predictive mean and variance at one point: the FITC plug-in mean and
    /// `lambda* + noise`.
    pub fn predict(&self, x_star: &[f64]) -> Result<(f64, f64)> {
        if x_star.len() != self.pseudo_inputs.ncols() {
            return Err(Error::invalid(format!(
                "prediction point has dimension {}, expert expects {}",
                x_star.len(),
                self.pseudo_inputs.ncols()
            )));
        }
        let m = self.pseudo_inputs.nrows();
        let mut k_star = DVector::zeros(m);
        for j in 0..m {
            let mut d2 = 0.0;
            for (c, &xv) in x_star.iter().enumerate() {
                let diff = self.pseudo_inputs[(j, c)] - xv;
                d2 += diff * diff;
            }
            k_star[j] = self.kernel.eval_sq_dist(d2);
        }
        let mean = self.mean + k_star.dot(&self.weights);
        let v = solve_lower_vec(&self.l_k, &k_star);
        let lambda_star = (self.kernel.signal_variance() - v.norm_squared()).max(0.0);
        Ok((mean, lambda_star + self.noise_variance))
    }

    /// Predictive means and the `lambda*` component for every row of `x`.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.ncols() != self.pseudo_inputs.ncols() {
            return Err(Error::invalid(format!(
                "prediction inputs have dimension {}, expert expects {}",
                x.ncols(),
                self.pseudo_inputs.ncols()
            )));
        }
        let k_mx = self.kernel.matrix(&self.pseudo_inputs, x)?;
        let means = DVector::from_fn(x.nrows(), |i, _| {
            self.mean + k_mx.column(i).dot(&self.weights)
        });
        let v = solve_lower(&self.l_k, &k_mx);
        let s = self.kernel.signal_variance();
        let lambdas = DVector::from_fn(x.nrows(), |i, _| {
            (s - v.column(i).norm_squared()).max(0.0)
        });
        Ok((means, lambdas))
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }
}

/// Single-point prediction; factorizes on every call, so prefer
/// [`SparseGpExpert::predictor`] in loops.
pub fn predict_expert(expert: &SparseGpExpert, x_star: &[f64]) -> Result<(f64, f64)> {
    expert.predictor()?.predict(x_star)
}

/// The matrices named in the training-conditional likelihood.
#[derive(Debug, Clone)]
pub struct FitcIntermediates {
    pub k_mm: DMatrix<f64>,
    pub k_mn: DMatrix<f64>,
    /// Diagonal of the Schur complement, clamped at zero from below.
    pub lambda: DVector<f64>,
    /// `K_MM + K_MN (Lambda + noise I)^-1 K_NM`.
    pub q_mm: DMatrix<f64>,
}

pub fn fitc_intermediates(expert: &SparseGpExpert, x: &DMatrix<f64>) -> Result<FitcIntermediates> {
    let ws = FitcWorkspace::build(expert, x)?;
    let mut q_mm = ws.k_mm.clone();
    let scaled = DMatrix::from_fn(ws.k_mn.nrows(), ws.k_mn.ncols(), |m, i| {
        ws.k_mn[(m, i)] / ws.d[i]
    });
    q_mm += &scaled * ws.k_mn.transpose();
    Ok(FitcIntermediates { k_mm: ws.k_mm, k_mn: ws.k_mn, lambda: ws.lambda, q_mm })
}

/// Shared factorizations for the marginal likelihood, its gradient, and the
/// pseudo-target posterior.
struct FitcWorkspace {
    k_mm: DMatrix<f64>,
    k_mn: DMatrix<f64>,
    l_k: DMatrix<f64>,
    /// `L_K^-1 K_MN`.
    v: DMatrix<f64>,
    lambda: DVector<f64>,
    /// `lambda + noise`.
    d: DVector<f64>,
    /// Cholesky factor of `I + V D^-1 V^T`.
    l_b: DMatrix<f64>,
}

impl FitcWorkspace {
    fn build(expert: &SparseGpExpert, x: &DMatrix<f64>) -> Result<Self> {
        if x.ncols() != expert.input_dim() {
            return Err(Error::invalid(format!(
                "inputs have dimension {}, expert expects {}",
                x.ncols(),
                expert.input_dim()
            )));
        }
        let s = expert.kernel.signal_variance();
        let noise = expert.noise_variance();
        let k_mm = expert.kernel.matrix(&expert.pseudo_inputs, &expert.pseudo_inputs)?;
        let k_mn = expert.kernel.matrix(&expert.pseudo_inputs, x)?;
        let (chol, _) = cholesky_with_jitter(&k_mm, s)?;
        let l_k = chol.l();
        let v = solve_lower(&l_k, &k_mn);
        let n = x.nrows();
        let lambda = DVector::from_fn(n, |i, _| (s - v.column(i).norm_squared()).max(0.0));
        let d = DVector::from_fn(n, |i, _| lambda[i] + noise);
        let m = k_mm.nrows();
        let mut b = DMatrix::identity(m, m);
        let w = DMatrix::from_fn(m, n, |r, c| v[(r, c)] / d[c].sqrt());
        b += &w * w.transpose();
        let l_b = nalgebra::Cholesky::new(b)
            .ok_or_else(|| Error::numerical("Cholesky of I + W W^T failed"))?
            .l();
        Ok(Self { k_mm, k_mn, l_k, v, lambda, d, l_b })
    }

    /// `Z = L_Q^-1 K_MN` where `L_Q = L_K L_B` factorizes `Q_MM`.
    fn z(&self) -> DMatrix<f64> {
        solve_lower(&self.l_b, &self.v)
    }
}

fn validate_training_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(Error::invalid(format!(
            "{} input rows for {} outputs",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training data contains non-finite values"));
    }
    Ok(())
}

/// FITC log marginal likelihood `log N(y | mean, Q_N)` through the M x M
/// Woodbury route; the dense N x N matrix is never formed.
pub fn fitc_log_marginal(expert: &SparseGpExpert, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    validate_training_data(x, y)?;
    let ws = FitcWorkspace::build(expert, x)?;
    Ok(log_marginal_from_workspace(&ws, expert.mean, y).0)
}

fn log_marginal_from_workspace(
    ws: &FitcWorkspace,
    mean: f64,
    y: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = y.len();
    let r = DVector::from_fn(n, |i, _| y[i] - mean);
    let z = ws.z();
    let zd = DMatrix::from_fn(z.nrows(), n, |m, i| z[(m, i)] / ws.d[i]);
    let u = &zd * &r;
    let alpha = DVector::from_fn(n, |i, _| r[i] / ws.d[i] - zd.column(i).dot(&u));
    let log_det =
        ws.d.iter().map(|v| v.ln()).sum::<f64>() + 2.0 * ws.l_b.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = r.dot(&alpha);
    let value = -0.5 * (n as f64 * LN_2PI + log_det + quad);
    (value, alpha, zd)
}

/// Gradient of [`fitc_log_marginal`] with respect to every optimized
/// parameter.
#[derive(Debug, Clone)]
pub struct FitcGradient {
    pub log_lengthscale: f64,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
    pub mean: f64,
    /// Same shape as the pseudo-input matrix.
    pub pseudo_inputs: DMatrix<f64>,
}

impl FitcGradient {
    pub fn norm(&self) -> f64 {
        (self.log_lengthscale.powi(2)
            + self.log_signal_variance.powi(2)
            + self.log_noise_variance.powi(2)
            + self.mean.powi(2)
            + self.pseudo_inputs.iter().map(|g| g * g).sum::<f64>())
        .sqrt()
    }
}

/// Log marginal likelihood and its analytic gradient.
pub fn fitc_log_marginal_with_grad(
    expert: &SparseGpExpert,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, FitcGradient)> {
    validate_training_data(x, y)?;
    let ws = FitcWorkspace::build(expert, x)?;
    let (value, alpha, zd) = log_marginal_from_workspace(&ws, expert.mean, y);
    let n = y.len();
    let m = ws.k_mm.nrows();
    let s = expert.kernel.signal_variance();
    let noise = expert.noise_variance();
    let ell2 = (2.0 * expert.kernel.log_lengthscale()).exp();

    let z = ws.z();
    // diag(Q_N^-1) and the adjoint diagonal s_i = (alpha_i^2 - P_ii)/2.
    let sdiag = DVector::from_fn(n, |i, _| {
        let p_ii = 1.0 / ws.d[i] - z.column(i).norm_squared() / (ws.d[i] * ws.d[i]);
        0.5 * (alpha[i] * alpha[i] - p_ii)
    });

    let r = DVector::from_fn(n, |i, _| y[i] - expert.mean);
    let u = &zd * &r;
    // gamma = Q_MM^-1 K_MN D^-1 r
    let gamma = solve_lower_transpose_vec(&ws.l_k, &solve_lower_transpose_vec(&ws.l_b, &u));
    // A^-1 K_MN and Q_MM^-1 K_MN D^-1
    let ainv_c = solve_lower_transpose(&ws.l_k, &ws.v);
    let qinv_cd = solve_lower_transpose(&ws.l_k, &solve_lower_transpose(&ws.l_b, &zd));
    // A^-1 and Q_MM^-1 from the shared factors.
    let ki = solve_lower(&ws.l_k, &DMatrix::identity(m, m));
    let a_inv = ki.transpose() * &ki;
    let t0 = solve_lower(&ws.l_b, &ki);
    let q_inv = t0.transpose() * &t0;

    // Adjoints of the covariance blocks: dL = sum(W_A o dA) + sum(W_C o dC) + ...
    let mut w_c = &gamma * alpha.transpose();
    w_c -= &qinv_cd;
    for i in 0..n {
        let scale = 2.0 * sdiag[i];
        for j in 0..m {
            w_c[(j, i)] -= scale * ainv_c[(j, i)];
        }
    }
    let ainv_c_scaled = DMatrix::from_fn(m, n, |j, i| ainv_c[(j, i)] * sdiag[i]);
    let mut w_a = &ainv_c_scaled * ainv_c.transpose();
    w_a -= (&gamma * gamma.transpose()).scale(0.5);
    w_a += (a_inv - q_inv).scale(0.5);

    // Hadamard products with the kernel blocks fold in d k / d theta.
    let ea = DMatrix::from_fn(m, m, |j, h| w_a[(j, h)] * ws.k_mm[(j, h)]);
    let ec = DMatrix::from_fn(m, n, |j, i| w_c[(j, i)] * ws.k_mn[(j, i)]);

    let sum_sdiag: f64 = sdiag.iter().sum();
    let d_log_signal = ea.sum() + ec.sum() + s * sum_sdiag;
    let d_log_noise = noise * sum_sdiag;
    let d_mean: f64 = alpha.iter().sum();

    let mut d_log_ell = 0.0;
    for j in 0..m {
        for h in 0..m {
            d_log_ell += ea[(j, h)] * crate::linalg::row_sq_dist(&expert.pseudo_inputs, j, &expert.pseudo_inputs, h);
        }
    }
    for j in 0..m {
        for i in 0..n {
            d_log_ell += ec[(j, i)] * crate::linalg::row_sq_dist(&expert.pseudo_inputs, j, x, i);
        }
    }
    d_log_ell /= ell2;

    // Pseudo-input gradient: row sums against the point coordinates.
    let mut d_pseudo = DMatrix::zeros(m, expert.input_dim());
    let ea_rowsum = DVector::from_fn(m, |j, _| ea.row(j).sum());
    let ec_rowsum = DVector::from_fn(m, |j, _| ec.row(j).sum());
    let ea_xt = &ea * &expert.pseudo_inputs;
    let ec_x = &ec * x;
    for j in 0..m {
        for c in 0..expert.input_dim() {
            let xt = expert.pseudo_inputs[(j, c)];
            d_pseudo[(j, c)] = (2.0 * (ea_xt[(j, c)] - ea_rowsum[j] * xt)
                + (ec_x[(j, c)] - ec_rowsum[j] * xt))
                / ell2;
        }
    }

    Ok((
        value,
        FitcGradient {
            log_lengthscale: d_log_ell,
            log_signal_variance: d_log_signal,
            log_noise_variance: d_log_noise,
            mean: d_mean,
            pseudo_inputs: d_pseudo,
        },
    ))
}

/// Dense GP log marginal likelihood; the exact counterpart used as the
/// oracle for the sparse approximation.
pub fn exact_gp_log_marginal(
    mean: f64,
    kernel: &KernelParams,
    noise_variance: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    validate_training_data(x, y)?;
    if !(noise_variance > 0.0 && noise_variance.is_finite()) {
        return Err(Error::invalid("noise variance must be positive and finite"));
    }
    let mut k = kernel.matrix(x, x)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_variance;
    }
    let (chol, _) = cholesky_with_jitter(&k, kernel.signal_variance())?;
    Ok(gaussian_log_density(y, &DVector::from_element(y.len(), mean), &chol))
}

/// Posterior mean of the pseudo-targets given the data:
/// `K_MM Q_MM^-1 (K_MN (Lambda + noise I)^-1 y + mean)`.
pub fn pseudo_target_posterior_mean(
    expert: &SparseGpExpert,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    validate_training_data(x, y)?;
    let ws = FitcWorkspace::build(expert, x)?;
    let n = y.len();
    let m = ws.k_mm.nrows();
    let scaled = DVector::from_fn(n, |i, _| y[i] / ws.d[i]);
    let rhs = &ws.k_mn * scaled + DVector::from_element(m, expert.mean);
    // Q_MM = (L_K L_B)(L_K L_B)^T
    let t = solve_lower_vec(&ws.l_b, &solve_lower_vec(&ws.l_k, &rhs));
    let w = solve_lower_transpose_vec(&ws.l_k, &solve_lower_transpose_vec(&ws.l_b, &t));
    Ok(&ws.k_mm * w)
}

/// Log density of the pseudo-targets under their GP prior
/// `N(f~ | mean, K_MM)`.
pub fn pseudo_target_prior_log_density(expert: &SparseGpExpert) -> Result<f64> {
    let k_mm = expert.kernel.matrix(&expert.pseudo_inputs, &expert.pseudo_inputs)?;
    let (chol, _) = cholesky_with_jitter(&k_mm, expert.kernel.signal_variance())?;
    let mean = DVector::from_element(expert.num_inducing(), expert.mean);
    Ok(gaussian_log_density(&expert.pseudo_targets, &mean, &chol))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertFitConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Gradient-norm stopping tolerance.
    pub tol: f64,
    /// Noise variance assigned to clusters too small to optimize; the
    /// trainer passes 1e-2 times the global output variance.
    pub small_cluster_noise: Option<f64>,
}

impl Default for ExpertFitConfig {
    fn default() -> Self {
        Self { max_iters: 200, learning_rate: 0.05, tol: 1e-5, small_cluster_noise: None }
    }
}

/// Number of inducing points for a cluster of size `n`:
/// `min(n, max(8, ceil(2 sqrt(n))))`, capped at `max_inducing`.
pub fn default_num_inducing(n: usize, max_inducing: usize) -> usize {
    let rule = (2.0 * (n as f64).sqrt()).ceil() as usize;
    rule.max(8).min(n).min(max_inducing.max(1))
}

/// Fits one expert by gradient ascent on the FITC log marginal likelihood.
///
/// Pseudo-inputs start at k-means centers of the inputs; hyperparameters
/// start from the scale of the data (median pairwise distance, output
/// variance). After the ascent the pseudo-targets are set to their
/// posterior mean. Clusters with fewer than four points skip optimization.
pub fn fit_expert(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    num_inducing: usize,
    cfg: &ExpertFitConfig,
    seed: u64,
) -> Result<SparseGpExpert> {
    fit_expert_impl(x, y, num_inducing, cfg, seed, None).map(|(expert, _)| expert)
}

/// [`fit_expert`] starting the ascent from a previously fitted expert's
/// hyperparameters (and pseudo-inputs, when the count matches).
pub fn fit_expert_warm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    num_inducing: usize,
    cfg: &ExpertFitConfig,
    seed: u64,
    warm: &SparseGpExpert,
) -> Result<SparseGpExpert> {
    fit_expert_impl(x, y, num_inducing, cfg, seed, Some(warm)).map(|(expert, _)| expert)
}

/// [`fit_expert`] plus the best-objective trace across accepted steps.
pub fn fit_expert_with_trace(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    num_inducing: usize,
    cfg: &ExpertFitConfig,
    seed: u64,
) -> Result<(SparseGpExpert, Vec<f64>)> {
    fit_expert_impl(x, y, num_inducing, cfg, seed, None)
}

fn fit_expert_impl(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    num_inducing: usize,
    cfg: &ExpertFitConfig,
    seed: u64,
    warm: Option<&SparseGpExpert>,
) -> Result<(SparseGpExpert, Vec<f64>)> {
    validate_training_data(x, y)?;
    let n = x.nrows();
    if num_inducing == 0 || num_inducing > n {
        return Err(Error::invalid(format!(
            "need 1 <= inducing points <= {n}, got {num_inducing}"
        )));
    }

    let y_slice: Vec<f64> = y.iter().copied().collect();
    let y_mean = crate::linalg::mean(&y_slice);
    let y_var = crate::linalg::population_variance(&y_slice);

    if n < 4 {
        let expert = degenerate_expert(x, y, y_mean, y_var, cfg)?;
        return Ok((expert, Vec::new()));
    }

    let bounds = expanded_bounding_box(x);

    // Scale-of-the-data initialization, or the previous optimum when
    // warm-starting.
    let (kernel0, noise0, mean0) = match warm {
        Some(w) if w.input_dim() == x.ncols() => (w.kernel, w.noise_variance(), w.mean),
        _ => {
            let ell0 = median_pairwise_distance(x).max(1e-3);
            (
                KernelParams::from_logs(ell0.ln(), y_var.max(1e-8).ln()),
                (0.1 * y_var).max(1e-8),
                y_mean,
            )
        }
    };

    // Pseudo-inputs: reuse the previous locations if the count matches,
    // otherwise k-means centers of the cluster inputs.
    let centers = match warm {
        Some(w) if w.num_inducing() == num_inducing && w.input_dim() == x.ncols() => {
            let mut c = w.pseudo_inputs.clone();
            for r in 0..c.nrows() {
                for col in 0..c.ncols() {
                    c[(r, col)] = c[(r, col)].clamp(bounds.lower[col], bounds.upper[col]);
                }
            }
            c
        }
        _ => {
            let km_cfg = ClusterConfig { output_weight: 1.0, max_iters: 25, restarts: 1, seed };
            kmeans(x, num_inducing, &km_cfg)?.centers
        }
    };

    let expert0 = SparseGpExpert::new(mean0, kernel0, noise0, centers, DVector::zeros(num_inducing))?;

    let d = x.ncols();
    let dim = 4 + num_inducing * d;
    let mut params = pack_params(&expert0);
    let mut adam = Adam::new(dim, cfg.learning_rate);

    let mut current = unpack_params(&params, num_inducing, d)?;
    let (mut value, mut grad) = fitc_log_marginal_with_grad(&current, x, y)?;
    if !value.is_finite() {
        return Err(Error::numerical("non-finite objective at initialization"));
    }
    let mut best_value = value;
    let mut best_params = params.clone();
    let mut trace = vec![best_value];

    for iter in 0..cfg.max_iters {
        if grad.norm() <= cfg.tol {
            break;
        }
        let flat_grad = pack_gradient(&grad);
        // Ascent: negate the gradient for the minimizing optimizer.
        let neg: Vec<f64> = flat_grad.iter().map(|g| -g).collect();
        adam.step(&mut params, &neg);
        project_params(&mut params, &bounds, num_inducing, d);

        current = unpack_params(&params, num_inducing, d)?;
        let (v, g) = fitc_log_marginal_with_grad(&current, x, y)?;
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite objective at iteration {iter}; last finite log marginal {best_value}"
            )));
        }
        value = v;
        grad = g;
        if value > best_value {
            best_value = value;
            best_params.copy_from_slice(&params);
        }
        trace.push(best_value);
    }

    let mut fitted = unpack_params(&best_params, num_inducing, d)?;
    fitted.pseudo_targets = pseudo_target_posterior_mean(&fitted, x, y)?;
    Ok((fitted, trace))
}

fn degenerate_expert(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    y_mean: f64,
    y_var: f64,
    cfg: &ExpertFitConfig,
) -> Result<SparseGpExpert> {
    let noise = cfg.small_cluster_noise.unwrap_or(1e-2 * y_var).max(1e-8);
    let ell = if x.nrows() > 1 { median_pairwise_distance(x).max(1e-3) } else { 1.0 };
    let signal = y_var.max(1e-8);
    let kernel = KernelParams::from_logs(ell.ln(), signal.ln());
    let mut expert =
        SparseGpExpert::new(y_mean, kernel, noise, x.clone(), DVector::zeros(x.nrows()))?;
    expert.pseudo_targets = pseudo_target_posterior_mean(&expert, x, y)?;
    Ok(expert)
}

fn median_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    if n < 2 {
        return 1.0;
    }
    // Deterministic stride subsample keeps this O(1) in the cluster size.
    let cap = 256usize;
    let idx: Vec<usize> = if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    };
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in idx.iter().skip(a + 1) {
            dists.push(crate::linalg::row_sq_dist(x, i, x, j).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Training-input bounding box expanded by 10% of the range per side.
fn expanded_bounding_box(x: &DMatrix<f64>) -> Bounds {
    let d = x.ncols();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for c in 0..d {
        for r in 0..x.nrows() {
            lower[c] = lower[c].min(x[(r, c)]);
            upper[c] = upper[c].max(x[(r, c)]);
        }
        let range = upper[c] - lower[c];
        lower[c] -= 0.1 * range;
        upper[c] += 0.1 * range;
    }
    Bounds { lower, upper }
}

const LOG_CLAMP: f64 = 30.0;

fn pack_params(expert: &SparseGpExpert) -> Vec<f64> {
    let mut out = vec![
        expert.kernel.log_lengthscale(),
        expert.kernel.log_signal_variance(),
        expert.log_noise_variance(),
        expert.mean,
    ];
    out.extend(expert.pseudo_inputs.transpose().iter());
    out
}

fn pack_gradient(grad: &FitcGradient) -> Vec<f64> {
    let mut out = vec![
        grad.log_lengthscale,
        grad.log_signal_variance,
        grad.log_noise_variance,
        grad.mean,
    ];
    out.extend(grad.pseudo_inputs.transpose().iter());
    out
}

fn unpack_params(params: &[f64], m: usize, d: usize) -> Result<SparseGpExpert> {
    let kernel = KernelParams::from_logs(params[0], params[1]);
    let pseudo = DMatrix::from_fn(m, d, |r, c| params[4 + r * d + c]);
    let mut expert = SparseGpExpert::new(params[3], kernel, 1.0, pseudo, DVector::zeros(m))?;
    expert.set_log_noise_variance(params[2]);
    Ok(expert)
}

fn project_params(params: &mut [f64], bounds: &Bounds, m: usize, d: usize) {
    for p in params.iter_mut().take(3) {
        *p = p.clamp(-LOG_CLAMP, LOG_CLAMP);
    }
    for r in 0..m {
        for c in 0..d {
            let idx = 4 + r * d + c;
            params[idx] = params[idx].clamp(bounds.lower[c], bounds.upper[c]);
        }
    }
}
