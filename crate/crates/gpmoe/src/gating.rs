//! Feedforward ReLU network with a softmax head, mapping inputs to expert
//! membership probabilities.
//!
//! Hidden layers apply `ReLU(A_j x + b_j)`; the output layer is affine so
//! logits can be negative. Training minimizes multiclass cross-entropy on
//! hard labels plus a quadratic penalty on the weights, with Adam,
//! mini-batches, and early stopping on a held-out validation split.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_j x d_{j-1}` weight matrix.
    pub weights: DMatrix<f64>,
    /// `d_j` bias vector.
    pub biases: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingNetwork {
    pub layers: Vec<Layer>,
    pub input_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatingTrainConfig {
    pub l2_penalty: f64,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without a new best validation loss before training stops.
    pub patience: usize,
    pub seed: u64,
}

impl Default for GatingTrainConfig {
    fn default() -> Self {
        Self {
            l2_penalty: 0.001,
            max_epochs: 1000,
            validation_fraction: 0.1,
            batch_size: 128,
            learning_rate: 1e-3,
            patience: 25,
            seed: 0,
        }
    }
}

/// Builds a network with the given hidden widths and `num_experts` outputs.
/// Weights are sampled from `N(0, 1/fan_in)`, biases start at zero.
pub fn init_network(
    input_dim: usize,
    hidden_dims: &[usize],
    num_experts: usize,
    seed: u64,
) -> GatingNetwork {
    assert!(input_dim >= 1 && num_experts >= 1, "dimensions must be at least 1");
    assert!(hidden_dims.iter().all(|&d| d >= 1), "hidden widths must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden_dims);
    dims.push(num_experts);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (fan_in as f64).powf(-0.5)).expect("valid std");
            Layer {
                weights: DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng)),
                biases: DVector::zeros(fan_out),
            }
        })
        .collect();
    GatingNetwork { layers, input_dim }
}

/// Default hidden widths (three hidden layers of 200, 40 and 30 units).
pub const DEFAULT_HIDDEN_DIMS: [usize; 3] = [200, 40, 30];

impl GatingNetwork {
    pub fn num_experts(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.nrows()
    }

    /// Raw scores before the softmax; hidden layers rectified, output affine.
    pub fn logits(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "gating input dimension {} does not match network input {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut a = DVector::from_column_slice(x);
        let last = self.layers.len() - 1;
        for (j, layer) in self.layers.iter().enumerate() {
            a = &layer.weights * a + &layer.biases;
            if j < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    /// Softmax of the logits, computed with max-subtraction.
    pub fn gate_probs(&self, x: &[f64]) -> Result<DVector<f64>> {
        let mut logits = self.logits(x)?;
        softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Batched forward pass; rows of `x` are points, rows of the result are
    /// gate probability vectors.
    pub fn gate_probs_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::invalid(format!(
                "gating input dimension {} does not match network input {}",
                x.ncols(),
                self.input_dim
            )));
        }
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (j, layer) in self.layers.iter().enumerate() {
            let mut z = &a * layer.weights.transpose();
            for r in 0..z.nrows() {
                for c in 0..z.ncols() {
                    z[(r, c)] += layer.biases[c];
                }
            }
            if j < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        for r in 0..a.nrows() {
            let mut row = a.row_mut(r);
            let max = row.max();
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(a)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.biases.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            for v in layer.weights.iter_mut() {
                *v = params[offset];
                offset += 1;
            }
            for v in layer.biases.iter_mut() {
                *v = params[offset];
                offset += 1;
            }
        }
        assert_eq!(offset, params.len(), "parameter vector length mismatch");
    }
}

fn softmax_in_place(logits: &mut DVector<f64>) {
    let max = logits.max();
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Penalized cross-entropy over a set of points and its gradient in the
/// flattened parameter order of [`GatingNetwork::flat_params`].
///
/// The data term is the mean cross-entropy `-log p(z_i | x_i)`; the penalty
/// is `l2 * sum_j ||A_j||_F^2` (biases unpenalized).
pub fn penalized_cross_entropy_with_grad(
    net: &GatingNetwork,
    x: &DMatrix<f64>,
    labels: &[usize],
    l2_penalty: f64,
) -> Result<(f64, Vec<f64>)> {
    let l = net.num_experts();
    validate_labels(labels, l, x.nrows())?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }

    // Forward pass keeping all activations: a[0] = inputs, a[j] after layer j.
    let mut activations: Vec<DMatrix<f64>> = Vec::with_capacity(net.layers.len() + 1);
    activations.push(x.clone());
    let last = net.layers.len() - 1;
    for (j, layer) in net.layers.iter().enumerate() {
        let prev = activations.last().expect("nonempty");
        let mut z = prev * layer.weights.transpose();
        for r in 0..z.nrows() {
            for c in 0..z.ncols() {
                z[(r, c)] += layer.biases[c];
            }
        }
        if j < last {
            z.apply(|v| *v = v.max(0.0));
        }
        activations.push(z);
    }

    // Softmax + cross-entropy; delta = (p - onehot)/n.
    let logits = activations.last().expect("nonempty").clone();
    let mut delta = logits.clone();
    let mut data_loss = 0.0;
    for r in 0..n {
        let row_max = logits.row(r).max();
        let mut log_sum = 0.0;
        for c in 0..l {
            log_sum += (logits[(r, c)] - row_max).exp();
        }
        let log_z = row_max + log_sum.ln();
        data_loss += log_z - logits[(r, labels[r])];
        for c in 0..l {
            delta[(r, c)] = ((logits[(r, c)] - log_z).exp()
                - if c == labels[r] { 1.0 } else { 0.0 })
                / n as f64;
        }
    }
    data_loss /= n as f64;

    let mut penalty = 0.0;
    for layer in &net.layers {
        penalty += layer.weights.iter().map(|w| w * w).sum::<f64>();
    }
    let loss = data_loss + l2_penalty * penalty;

    // Backward pass.
    let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(net.layers.len());
    let mut upstream = delta;
    for j in (0..net.layers.len()).rev() {
        let layer = &net.layers[j];
        let mut grad_w = upstream.transpose() * &activations[j];
        grad_w += layer.weights.scale(2.0 * l2_penalty);
        let grad_b = DVector::from_fn(layer.biases.len(), |c, _| upstream.column(c).sum());
        if j > 0 {
            let mut down = &upstream * &layer.weights;
            // ReLU mask from the stored post-activations.
            for r in 0..down.nrows() {
                for c in 0..down.ncols() {
                    if activations[j][(r, c)] <= 0.0 {
                        down[(r, c)] = 0.0;
                    }
                }
            }
            upstream = down;
        }
        grads.push((grad_w, grad_b));
    }
    grads.reverse();

    let mut flat = Vec::new();
    for (gw, gb) in &grads {
        flat.extend(gw.iter());
        flat.extend(gb.iter());
    }
    Ok((loss, flat))
}

/// Mean cross-entropy of a label set under the network, without the penalty.
pub fn cross_entropy(net: &GatingNetwork, x: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let probs = net.gate_probs_batch(x)?;
    let l = net.num_experts();
    validate_labels(labels, l, x.nrows())?;
    let mut loss = 0.0;
    for (r, &z) in labels.iter().enumerate() {
        loss -= probs[(r, z)].max(1e-300).ln();
    }
    Ok(loss / labels.len().max(1) as f64)
}

fn validate_labels(labels: &[usize], num_experts: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {} points", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&z| z >= num_experts) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {num_experts} experts"
        )));
    }
    Ok(())
}

/// Trains the network on hard allocations, returning the weights with the
/// best validation cross-entropy seen across epochs.
pub fn train_gating(
    net: GatingNetwork,
    x: &DMatrix<f64>,
    labels: &[usize],
    cfg: &GatingTrainConfig,
) -> Result<GatingNetwork> {
    let n = x.nrows();
    let num_experts = net.num_experts();
    validate_labels(labels, num_experts, n)?;
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::invalid("validation fraction must lie in [0, 1)"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::invalid("batch size and epoch count must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = validation_split(labels, num_experts, cfg.validation_fraction, &mut rng);
    let gather = |idx: &[usize]| -> (DMatrix<f64>, Vec<usize>) {
        let xs = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
        let zs = idx.iter().map(|&i| labels[i]).collect();
        (xs, zs)
    };
    let (x_train, z_train) = gather(&train_idx);
    let (x_val, z_val) = gather(&val_idx);
    let use_val = !val_idx.is_empty();

    let mut net = net;
    let mut params = net.flat_params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut stall = 0usize;

    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    for _epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = DMatrix::from_fn(chunk.len(), x.ncols(), |r, c| x_train[(chunk[r], c)]);
            let zb: Vec<usize> = chunk.iter().map(|&i| z_train[i]).collect();
            net.set_flat_params(&params);
            let (_, grad) = penalized_cross_entropy_with_grad(&net, &xb, &zb, cfg.l2_penalty)?;
            adam.step(&mut params, &grad);
        }
        net.set_flat_params(&params);
        let metric = if use_val {
            cross_entropy(&net, &x_val, &z_val)?
        } else {
            cross_entropy(&net, &x_train, &z_train)?
        };
        if !metric.is_finite() {
            return Err(Error::numerical("non-finite validation loss during gating training"));
        }
        if metric < best_val {
            best_val = metric;
            best_params.copy_from_slice(&params);
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
        if best_val <= 1e-6 {
            break; // the classifier is as good as exact
        }
    }
    net.set_flat_params(&best_params);
    Ok(net)
}

/// Seeded validation split, stratified by label when every class has at
/// least two members.
fn validation_split(
    labels: &[usize],
    num_experts: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let mut counts = vec![0usize; num_experts];
    for &z in labels {
        counts[z] += 1;
    }
    let stratify = counts.iter().all(|&c| c >= 2);
    let mut train = Vec::new();
    let mut val = Vec::new();
    if stratify {
        for class in 0..num_experts {
            let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            idx.shuffle(rng);
            let k = ((fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
            val.extend(idx.drain(..k));
            train.extend(idx);
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let k = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        val.extend(idx.drain(..k));
        train.extend(idx);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
