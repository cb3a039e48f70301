//! Training algorithms for the mixture: the alternating
//! maximization-maximization loop, the one-pass cluster-classify-regress
//! approximation, and the two-iteration randomly initialized variant.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_joint_features, elbow_select_l, kmeans, ClusterConfig};
use crate::error::{Error, Result};
use crate::gating::{init_network, train_gating, GatingTrainConfig, DEFAULT_HIDDEN_DIMS};
use crate::model::{r_squared, MoeModel};
use crate::sparse_gp::{
    default_num_inducing, fit_expert, fit_expert_warm, pseudo_target_prior_log_density,
    ExpertFitConfig, SparseGpExpert,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// One-pass cluster-classify-regress.
    Ccr,
    /// CCR initialization refined by MM iterations.
    Mm,
    /// Two MM iterations from a random allocation.
    Mm2r,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algorithm::Ccr => write!(f, "ccr"),
            Algorithm::Mm => write!(f, "mm"),
            Algorithm::Mm2r => write!(f, "mm2r"),
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ccr" => Ok(Algorithm::Ccr),
            "mm" => Ok(Algorithm::Mm),
            "mm2r" => Ok(Algorithm::Mm2r),
            other => Err(Error::invalid(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumExperts {
    /// Choose by the elbow rule over `elbow_range`.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub num_experts: NumExperts,
    pub max_mm_iters: usize,
    /// Stop MM when the train R^2 gain falls below this.
    pub r2_improvement_tol: f64,
    pub cluster: ClusterConfig,
    pub gating: GatingTrainConfig,
    pub expert: ExpertFitConfig,
    pub max_inducing: usize,
    pub hidden_dims: Vec<usize>,
    /// Candidate expert counts for the elbow rule.
    pub elbow_range: Vec<usize>,
    /// Re-allocate CCR's regression labels to the trained classifier's
    /// predictions before fitting the experts.
    pub ccr_reallocate: bool,
    /// Run `mm` from a random allocation instead of the CCR solution.
    pub mm_random_init: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ccr,
            num_experts: NumExperts::Auto,
            max_mm_iters: 20,
            r2_improvement_tol: 1e-4,
            cluster: ClusterConfig::default(),
            gating: GatingTrainConfig::default(),
            expert: ExpertFitConfig::default(),
            max_inducing: 64,
            hidden_dims: DEFAULT_HIDDEN_DIMS.to_vec(),
            elbow_range: (1..=8).collect(),
            ccr_reallocate: true,
            mm_random_init: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub log_posterior: f64,
    pub train_r2: f64,
    pub allocation_changes: usize,
    pub seconds: f64,
    /// Allocation objective of the previous labels under the current
    /// parameters, when an allocation step ran.
    pub allocation_objective_before: Option<f64>,
    /// Allocation objective of the new argmax labels under the same
    /// parameters.
    pub allocation_objective_after: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub iterations: Vec<IterationRecord>,
    pub num_experts: usize,
    pub total_seconds: f64,
    /// Set when training stopped early on a numerical failure; the model
    /// returned alongside is the last good state.
    pub failure: Option<String>,
}

/// Splitmix-style seed derivation so parallel sub-tasks are decorrelated
/// but fully reproducible.
fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)))
        .wrapping_add(0x632be59bd9b4e019u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-point argmax allocation:
/// `z_i = argmax_l log g_l(x_i) + log N(y_i | f_l(x_i), lambda_i + noise_l)`.
pub fn allocate(model: &MoeModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<usize>> {
    Ok(model.predictor()?.allocation_scores(x, y)?.argmax_labels())
}

/// The augmented objective: gate log-probabilities of the hard labels,
/// local Gaussian log-likelihoods, and the pseudo-target prior terms.
pub fn augmented_log_posterior(
    model: &MoeModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    labels: &[usize],
) -> Result<f64> {
    if labels.len() != y.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} points",
            labels.len(),
            y.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&z| z >= model.num_experts()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} experts",
            model.num_experts()
        )));
    }
    let scores = model.predictor()?.allocation_scores(x, y)?;
    let mut value = scores.objective(labels);
    for expert in &model.experts {
        value += pseudo_target_prior_log_density(expert)?;
    }
    Ok(value)
}

/// Makes every label in `0..l` occupied by moving, per empty class, the
/// most outlying point (largest |y - cluster mean|) out of the largest
/// cluster. Used when no fitted model exists to rank points.
fn repair_empty_labels_by_y(labels: &mut [usize], y: &DVector<f64>, l: usize) {
    loop {
        let mut counts = vec![0usize; l];
        for &z in labels.iter() {
            counts[z] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let largest = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(j, _)| j)
            .expect("at least one cluster");
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == largest).collect();
        let mean = members.iter().map(|&i| y[i]).sum::<f64>() / members.len() as f64;
        let mover = members
            .into_iter()
            .max_by(|&a, &b| {
                let da = (y[a] - mean).abs();
                let db = (y[b] - mean).abs();
                da.partial_cmp(&db).expect("finite").then(b.cmp(&a))
            })
            .expect("nonempty cluster");
        labels[mover] = empty;
    }
}

/// Empty-cluster repair with a fitted model: move the worst-fit point
/// (lowest local log-likelihood) out of the largest cluster.
fn repair_empty_labels_by_likelihood(
    labels: &mut [usize],
    likelihood: &DMatrix<f64>,
    l: usize,
) {
    loop {
        let mut counts = vec![0usize; l];
        for &z in labels.iter() {
            counts[z] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let largest = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(j, _)| j)
            .expect("at least one cluster");
        let mover = (0..labels.len())
            .filter(|&i| labels[i] == largest)
            .min_by(|&a, &b| {
                likelihood[(a, largest)]
                    .partial_cmp(&likelihood[(b, largest)])
                    .expect("finite")
                    .then(a.cmp(&b))
            })
            .expect("nonempty cluster");
        labels[mover] = empty;
    }
}

/// Fits the experts for a fixed allocation and trains the gate on the same
/// labels; the two run concurrently, experts in parallel over clusters.
pub fn fit_parameters(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    num_experts: usize,
    round: u64,
) -> Result<MoeModel> {
    fit_parameters_warm(x, y, labels, cfg, num_experts, round, None)
}

/// [`fit_parameters`] continuing from a previous model: experts restart
/// their ascent at the old optimum and the gate keeps its weights, as an
/// iterated-conditional-modes parameter step.
pub fn fit_parameters_warm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    num_experts: usize,
    round: u64,
    warm: Option<&MoeModel>,
) -> Result<MoeModel> {
    if labels.len() != y.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "{} labels for {} points",
            labels.len(),
            y.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&z| z >= num_experts) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {num_experts} experts"
        )));
    }
    if y.len() < num_experts {
        return Err(Error::invalid(format!(
            "{} points cannot occupy {num_experts} experts",
            y.len()
        )));
    }
    let mut labels = labels.to_vec();
    repair_empty_labels_by_y(&mut labels, y, num_experts);

    let y_all: Vec<f64> = y.iter().copied().collect();
    let global_var = crate::linalg::population_variance(&y_all);
    let expert_cfg = ExpertFitConfig {
        small_cluster_noise: Some((1e-2 * global_var).max(1e-8)),
        ..cfg.expert.clone()
    };

    let fit_all_experts = || -> Result<Vec<SparseGpExpert>> {
        (0..num_experts)
            .into_par_iter()
            .map(|l| {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
                let cx = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
                let cy = DVector::from_fn(idx.len(), |r, _| y[idx[r]]);
                let m = default_num_inducing(idx.len(), cfg.max_inducing);
                let seed = derive_seed(cfg.seed, round, l as u64);
                match warm.map(|w| &w.experts[l]) {
                    Some(prev) => fit_expert_warm(&cx, &cy, m, &expert_cfg, seed, prev),
                    None => fit_expert(&cx, &cy, m, &expert_cfg, seed),
                }
            })
            .collect()
    };
    let train_gate = || -> Result<crate::gating::GatingNetwork> {
        let gate_seed = derive_seed(cfg.seed, round, 0xa11);
        let net = match warm {
            Some(w) => w.gate.clone(),
            None => init_network(x.ncols(), &cfg.hidden_dims, num_experts, gate_seed),
        };
        let gate_cfg = GatingTrainConfig { seed: gate_seed, ..cfg.gating.clone() };
        train_gating(net, x, &labels, &gate_cfg)
    };

    let (experts, gate) = rayon::join(fit_all_experts, train_gate);
    MoeModel::new(experts?, gate?)
}

/// The trainer's accuracy metric: hard-allocation R^2 (the soft mixture
/// smears across gate transitions on discontinuous targets).
pub fn evaluate_r2(model: &MoeModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let (means, _) = model.predictor()?.predict_hard_batch(x)?;
    r_squared(y, &means)
}

/// Initial state for the MM loop.
pub enum MmInit {
    /// Start from a fitted model; `labels` are the allocation that produced
    /// it, when known, so the first re-allocation can be scored against it.
    Model { model: MoeModel, labels: Option<Vec<usize>> },
    /// Start by fitting parameters to a fixed allocation.
    Labels { labels: Vec<usize>, num_experts: usize },
}

/// Alternates exact allocation with parameter fitting, keeping the best
/// train-R^2 iterate.
///
/// Iteration 1 of a label-initialized run is the initial parameter fit; a
/// model-initialized run starts allocating immediately. The loop stops at
/// `max_mm_iters` or when the R^2 gain drops
/// below `r2_improvement_tol`. A numerical failure mid-loop ends training
/// with the best state so far and a note in the trace.
pub fn fit_mm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
    init: MmInit,
) -> Result<(MoeModel, TrainTrace)> {
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut iteration = 0usize;

    let (mut model, mut prev_labels, num_experts) = match init {
        MmInit::Model { model, labels } => {
            let l = model.num_experts();
            (model, labels, l)
        }
        MmInit::Labels { labels, num_experts } => {
            iteration = 1;
            let iter_start = Instant::now();
            let model = fit_parameters(x, y, &labels, cfg, num_experts, iteration as u64)?;
            let train_r2 = evaluate_r2(&model, x, y)?;
            let log_posterior = augmented_log_posterior(&model, x, y, &labels)?;
            trace.iterations.push(IterationRecord {
                iteration,
                log_posterior,
                train_r2,
                allocation_changes: 0,
                seconds: iter_start.elapsed().as_secs_f64(),
                allocation_objective_before: None,
                allocation_objective_after: None,
            });
            (model, Some(labels), num_experts)
        }
    };
    trace.num_experts = num_experts;

    let mut best_model = model.clone();
    let mut best_r2 = evaluate_r2(&model, x, y)?;
    let mut prev_r2 = best_r2;

    while iteration < cfg.max_mm_iters {
        iteration += 1;
        let iter_start = Instant::now();

        // Allocation step: exact per-point argmax at fixed parameters.
        let scores = match model.predictor().and_then(|p| p.allocation_scores(x, y)) {
            Ok(s) => s,
            Err(Error::Numerical(msg)) => {
                trace.failure = Some(format!("iteration {iteration}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let objective_before = prev_labels.as_ref().map(|z| scores.objective(z));
        let mut labels = scores.argmax_labels();
        let objective_after = scores.objective(&labels);
        repair_empty_labels_by_likelihood(&mut labels, &scores.likelihood, num_experts);

        let changes = match &prev_labels {
            Some(prev) => labels.iter().zip(prev.iter()).filter(|(a, b)| a != b).count(),
            None => labels.len(),
        };

        // Parameter step, continuing from the current optimum.
        let new_model = match fit_parameters_warm(
            x,
            y,
            &labels,
            cfg,
            num_experts,
            iteration as u64,
            Some(&model),
        ) {
            Ok(m) => m,
            Err(Error::Numerical(msg)) => {
                trace.failure = Some(format!("iteration {iteration}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        model = new_model;
        let train_r2 = evaluate_r2(&model, x, y)?;
        let log_posterior = augmented_log_posterior(&model, x, y, &labels)?;
        trace.iterations.push(IterationRecord {
            iteration,
            log_posterior,
            train_r2,
            allocation_changes: changes,
            seconds: iter_start.elapsed().as_secs_f64(),
            allocation_objective_before: objective_before,
            allocation_objective_after: Some(objective_after),
        });

        if train_r2 > best_r2 {
            best_r2 = train_r2;
            best_model = model.clone();
        }
        let improvement = train_r2 - prev_r2;
        prev_r2 = train_r2;
        prev_labels = Some(labels);
        if improvement < cfg.r2_improvement_tol {
            break;
        }
    }

    trace.total_seconds = start.elapsed().as_secs_f64();
    Ok((best_model, trace))
}

fn resolve_num_experts(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &TrainConfig) -> Result<usize> {
    match cfg.num_experts {
        NumExperts::Fixed(l) => {
            if l == 0 {
                return Err(Error::invalid("the expert count must be at least 1"));
            }
            Ok(l)
        }
        NumExperts::Auto => {
            let feasible: Vec<usize> =
                cfg.elbow_range.iter().copied().filter(|&l| l <= y.len()).collect();
            if feasible.is_empty() {
                return Err(Error::invalid("elbow range has no feasible candidate"));
            }
            let cluster = ClusterConfig { seed: cfg.seed, ..cfg.cluster.clone() };
            elbow_select_l(x, y, &feasible, &cluster)
        }
    }
}

/// One-pass training: cluster the rescaled joint features, train the
/// classifier on the cluster labels, optionally re-allocate to the
/// classifier's own predictions, then fit the experts.
pub fn fit_ccr(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &TrainConfig) -> Result<(MoeModel, TrainTrace)> {
    fit_ccr_with_labels(x, y, cfg).map(|(m, t, _)| (m, t))
}

pub(crate) fn fit_ccr_with_labels(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<(MoeModel, TrainTrace, Vec<usize>)> {
    let start = Instant::now();
    let num_experts = resolve_num_experts(x, y, cfg)?;
    if y.len() < num_experts {
        return Err(Error::invalid(format!(
            "{} points cannot occupy {num_experts} experts",
            y.len()
        )));
    }

    let cluster_cfg = ClusterConfig { seed: cfg.seed, ..cfg.cluster.clone() };
    let features = build_joint_features(x, y, &cluster_cfg)?;
    let km = kmeans(&features, num_experts, &cluster_cfg)?;
    let mut labels = km.labels;

    // Classifier on the cluster labels.
    let gate_seed = derive_seed(cfg.seed, 0xcc, 0xa11);
    let net = init_network(x.ncols(), &cfg.hidden_dims, num_experts, gate_seed);
    let gate_cfg = GatingTrainConfig { seed: gate_seed, ..cfg.gating.clone() };
    let gate = train_gating(net, x, &labels, &gate_cfg)?;

    // Gate-consistency step: regress on the classifier's own predictions.
    let mut changes = 0usize;
    if cfg.ccr_reallocate {
        let probs = gate.gate_probs_batch(x)?;
        let realloc: Vec<usize> = (0..labels.len())
            .map(|i| {
                let row = probs.row(i);
                let mut best = 0;
                for j in 1..num_experts {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        changes = realloc.iter().zip(labels.iter()).filter(|(a, b)| a != b).count();
        labels = realloc;
        repair_empty_labels_by_y(&mut labels, y, num_experts);
    }

    // Experts per cluster, sharing the gate we already trained.
    let y_all: Vec<f64> = y.iter().copied().collect();
    let global_var = crate::linalg::population_variance(&y_all);
    let expert_cfg = ExpertFitConfig {
        small_cluster_noise: Some((1e-2 * global_var).max(1e-8)),
        ..cfg.expert.clone()
    };
    let experts: Vec<SparseGpExpert> = (0..num_experts)
        .into_par_iter()
        .map(|l| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
            let cx = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
            let cy = DVector::from_fn(idx.len(), |r, _| y[idx[r]]);
            let m = default_num_inducing(idx.len(), cfg.max_inducing);
            fit_expert(&cx, &cy, m, &expert_cfg, derive_seed(cfg.seed, 0xcc, l as u64))
        })
        .collect::<Result<_>>()?;
    let model = MoeModel::new(experts, gate)?;

    let train_r2 = evaluate_r2(&model, x, y)?;
    let log_posterior = augmented_log_posterior(&model, x, y, &labels)?;
    let trace = TrainTrace {
        iterations: vec![IterationRecord {
            iteration: 1,
            log_posterior,
            train_r2,
            allocation_changes: changes,
            seconds: start.elapsed().as_secs_f64(),
            allocation_objective_before: None,
            allocation_objective_after: None,
        }],
        num_experts,
        total_seconds: start.elapsed().as_secs_f64(),
        failure: None,
    };
    Ok((model, trace, labels))
}

/// MM for exactly two iterations from a seeded uniform random allocation.
pub fn fit_mm2r(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &TrainConfig) -> Result<(MoeModel, TrainTrace)> {
    let num_experts = resolve_num_experts(x, y, cfg)?;
    let labels = random_labels(y.len(), num_experts, cfg.seed);
    let capped = TrainConfig { max_mm_iters: 2, ..cfg.clone() };
    fit_mm(x, y, &capped, MmInit::Labels { labels, num_experts })
}

pub fn random_labels(n: usize, num_experts: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x2a, 0));
    (0..n).map(|_| rng.gen_range(0..num_experts)).collect()
}

/// Dispatches on the configured algorithm. `mm` is CCR-initialized unless
/// `mm_random_init` is set; its trace includes the CCR pass as iteration 1.
pub fn train(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &TrainConfig) -> Result<(MoeModel, TrainTrace)> {
    if !(cfg.r2_improvement_tol >= 0.0 && cfg.r2_improvement_tol.is_finite()) {
        return Err(Error::invalid("the R^2 improvement tolerance must be nonnegative"));
    }
    match cfg.algorithm {
        Algorithm::Ccr => fit_ccr(x, y, cfg),
        Algorithm::Mm2r => fit_mm2r(x, y, cfg),
        Algorithm::Mm => {
            if cfg.mm_random_init {
                let num_experts = resolve_num_experts(x, y, cfg)?;
                let labels = random_labels(y.len(), num_experts, cfg.seed);
                return fit_mm(x, y, cfg, MmInit::Labels { labels, num_experts });
            }
            let start = Instant::now();
            let (ccr_model, ccr_trace, labels) = fit_ccr_with_labels(x, y, cfg)?;
            let fixed = TrainConfig {
                num_experts: NumExperts::Fixed(ccr_model.num_experts()),
                ..cfg.clone()
            };
            let (model, mm_trace) =
                fit_mm(x, y, &fixed, MmInit::Model { model: ccr_model, labels: Some(labels) })?;
            let mut iterations = ccr_trace.iterations;
            for mut rec in mm_trace.iterations {
                rec.iteration += 1;
                iterations.push(rec);
            }
            let trace = TrainTrace {
                iterations,
                num_experts: mm_trace.num_experts,
                total_seconds: start.elapsed().as_secs_f64(),
                failure: mm_trace.failure,
            };
            Ok((model, trace))
        }
    }
}
