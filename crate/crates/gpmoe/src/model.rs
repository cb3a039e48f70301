//! The mixture model: experts plus gating network, and every prediction
//! operation defined on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gating::GatingNetwork;
use crate::linalg::scalar_gaussian_log_density;
use crate::sparse_gp::{ExpertPredictor, SparseGpExpert};

#[derive(Debug, Clone)]
pub struct MoeModel {
    pub experts: Vec<SparseGpExpert>,
    pub gate: GatingNetwork,
}

impl MoeModel {
    pub fn new(experts: Vec<SparseGpExpert>, gate: GatingNetwork) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::invalid("a mixture needs at least one expert"));
        }
        if gate.num_experts() != experts.len() {
            return Err(Error::invalid(format!(
                "gate outputs {} classes for {} experts",
                gate.num_experts(),
                experts.len()
            )));
        }
        let d = experts[0].input_dim();
        if experts.iter().any(|e| e.input_dim() != d) || gate.input_dim != d {
            return Err(Error::invalid("experts and gate disagree on the input dimension"));
        }
        Ok(Self { experts, gate })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.experts[0].input_dim()
    }

    /// Factorizes every expert once for repeated predictions.
    pub fn predictor(&self) -> Result<MoePredictor<'_>> {
        let experts = self.experts.iter().map(|e| e.predictor()).collect::<Result<Vec<_>>>()?;
        Ok(MoePredictor { model: self, experts })
    }
}

#[derive(Debug, Clone)]
pub struct HardPrediction {
    pub mean: f64,
    pub variance: f64,
    pub expert: usize,
    pub gates: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SoftPrediction {
    pub mean: f64,
    pub variance: f64,
    pub gates: DVector<f64>,
}

pub struct MoePredictor<'a> {
    model: &'a MoeModel,
    experts: Vec<ExpertPredictor>,
}

impl MoePredictor<'_> {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Argmax-gate prediction: route to the most probable expert.
    pub fn predict_hard(&self, x_star: &[f64]) -> Result<HardPrediction> {
        let gates = self.model.gate.gate_probs(x_star)?;
        let expert = argmax(gates.as_slice());
        let (mean, variance) = self.experts[expert].predict(x_star)?;
        Ok(HardPrediction { mean, variance, expert, gates })
    }

    /// Gate-weighted mixture prediction with exact mixture moments.
    pub fn predict_soft(&self, x_star: &[f64]) -> Result<SoftPrediction> {
        let gates = self.model.gate.gate_probs(x_star)?;
        let mut mean = 0.0;
        let mut second = 0.0;
        for (l, predictor) in self.experts.iter().enumerate() {
            let (m, v) = predictor.predict(x_star)?;
            mean += gates[l] * m;
            second += gates[l] * (v + m * m);
        }
        Ok(SoftPrediction { mean, variance: second - mean * mean, gates })
    }

    /// Mixture density `sum_l g_l N(y | m_l, v_l)` on a grid of outputs.
    pub fn predictive_density(&self, x_star: &[f64], y_grid: &[f64]) -> Result<Vec<f64>> {
        if y_grid.is_empty() {
            return Err(Error::invalid("empty output grid"));
        }
        let gates = self.model.gate.gate_probs(x_star)?;
        let components: Vec<(f64, f64)> = self
            .experts
            .iter()
            .map(|p| p.predict(x_star))
            .collect::<Result<Vec<_>>>()?;
        Ok(y_grid
            .iter()
            .map(|&y| {
                components
                    .iter()
                    .zip(gates.iter())
                    .map(|((m, v), g)| g * scalar_gaussian_log_density(y, *m, *v).exp())
                    .sum()
            })
            .collect())
    }

    /// Evenly spaced output grid spanning six standard deviations around
    /// every mixture component, so no mode's mass is left outside even
    /// when its gate weight is small.
    pub fn density_grid(&self, x_star: &[f64], points: usize) -> Result<Vec<f64>> {
        if points < 2 {
            return Err(Error::invalid("grid needs at least two points"));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for predictor in &self.experts {
            let (m, v) = predictor.predict(x_star)?;
            let sd = v.max(1e-300).sqrt();
            lo = lo.min(m - 6.0 * sd);
            hi = hi.max(m + 6.0 * sd);
        }
        let step = (hi - lo) / (points - 1) as f64;
        Ok((0..points).map(|i| lo + step * i as f64).collect())
    }

    /// Hard-allocation means and variances for every row of `x`.
    pub fn predict_hard_batch(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = x.nrows();
        let gates = self.model.gate.gate_probs_batch(x)?;
        let l = self.experts.len();
        let chosen: Vec<usize> = (0..n)
            .map(|i| {
                let row = gates.row(i);
                let mut best = 0;
                for j in 1..l {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let mut mean = DVector::<f64>::zeros(n);
        let mut variance = DVector::<f64>::zeros(n);
        for (j, predictor) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..n).filter(|&i| chosen[i] == j).collect();
            if idx.is_empty() {
                continue;
            }
            let xs = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
            let (means, lambdas) = predictor.predict_batch(&xs)?;
            for (r, &i) in idx.iter().enumerate() {
                mean[i] = means[r];
                variance[i] = lambdas[r] + predictor.noise_variance();
            }
        }
        Ok((mean, variance))
    }

    /// Soft means and variances for every row of `x`.
    pub fn predict_soft_batch(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = x.nrows();
        let gates = self.model.gate.gate_probs_batch(x)?;
        let mut mean = DVector::<f64>::zeros(n);
        let mut second = DVector::<f64>::zeros(n);
        for (l, predictor) in self.experts.iter().enumerate() {
            let (means, lambdas) = predictor.predict_batch(x)?;
            let noise = predictor.noise_variance();
            for i in 0..n {
                let g = gates[(i, l)];
                let v = lambdas[i] + noise;
                mean[i] += g * means[i];
                second[i] += g * (v + means[i] * means[i]);
            }
        }
        let variance = DVector::from_fn(n, |i, _| second[i] - mean[i] * mean[i]);
        Ok((mean, variance))
    }

    /// Per-point allocation scores: gate log-probabilities, the local
    /// Gaussian log-likelihoods, and their sum.
    pub fn allocation_scores(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<AllocationScores> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "{} input rows for {} outputs",
                x.nrows(),
                y.len()
            )));
        }
        let n = x.nrows();
        let l = self.experts.len();
        let gates = self.model.gate.gate_probs_batch(x)?;
        let mut likelihood = DMatrix::<f64>::zeros(n, l);
        for (j, predictor) in self.experts.iter().enumerate() {
            let (means, lambdas) = predictor.predict_batch(x)?;
            let noise = predictor.noise_variance();
            for i in 0..n {
                likelihood[(i, j)] =
                    scalar_gaussian_log_density(y[i], means[i], lambdas[i] + noise);
            }
        }
        let combined = DMatrix::from_fn(n, l, |i, j| gates[(i, j)].max(1e-300).ln() + likelihood[(i, j)]);
        Ok(AllocationScores { likelihood, combined })
    }
}

pub struct AllocationScores {
    /// `log N(y_i | f_l(x_i), lambda + noise)` per point and expert.
    pub likelihood: DMatrix<f64>,
    /// Gate log-probability plus likelihood.
    pub combined: DMatrix<f64>,
}

impl AllocationScores {
    /// Row-wise argmax, ties to the smallest expert index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.combined.nrows())
            .map(|i| {
                let row = self.combined.row(i);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Total combined score of a label assignment.
    pub fn objective(&self, labels: &[usize]) -> f64 {
        labels.iter().enumerate().map(|(i, &z)| self.combined[(i, z)]).sum()
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Coefficient of determination `1 - SSE / SST`.
pub fn r_squared(y_true: &DVector<f64>, y_pred: &DVector<f64>) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::invalid(format!(
            "{} true values vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mean = y_true.sum() / y_true.len() as f64;
    let sst: f64 = y_true.iter().map(|v| (v - mean) * (v - mean)).sum();
    if sst == 0.0 {
        return Err(Error::invalid("constant outputs have no explainable variance"));
    }
    let sse: f64 = y_true.iter().zip(y_pred.iter()).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(1.0 - sse / sst)
}
