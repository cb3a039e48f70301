//! Machine-readable run reports and benchmark aggregation.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::Result;
use crate::model::{r_squared, MoeModel};
use crate::trainer::{Algorithm, IterationRecord, TrainConfig, TrainTrace};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One training run: accuracy, sizes, timings, and the configuration echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub dataset: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub num_experts: usize,
    pub per_expert_inducing: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// Hard-allocation R^2 (the primary metric).
    pub train_r2: f64,
    pub test_r2: f64,
    /// Gate-weighted mixture R^2.
    pub train_r2_soft: f64,
    pub test_r2_soft: f64,
    pub seconds_total: f64,
    pub iterations: Vec<IterationRecord>,
    /// Set when training stopped on a numerical failure and the model is
    /// the last good state.
    pub failure: Option<String>,
    pub config: TrainConfig,
}

pub fn build_report(
    model: &MoeModel,
    trace: &TrainTrace,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunReport> {
    let predictor = model.predictor()?;
    let (train_hard, _) = predictor.predict_hard_batch(&train.x)?;
    let (test_hard, _) = predictor.predict_hard_batch(&test.x)?;
    let (train_soft, _) = predictor.predict_soft_batch(&train.x)?;
    let (test_soft, _) = predictor.predict_soft_batch(&test.x)?;
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset: train.name.trim_end_matches("_train").to_string(),
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        num_experts: model.num_experts(),
        per_expert_inducing: model.experts.iter().map(|e| e.num_inducing()).collect(),
        n_train: train.len(),
        n_test: test.len(),
        train_r2: r_squared(&train.y, &train_hard)?,
        test_r2: r_squared(&test.y, &test_hard)?,
        train_r2_soft: r_squared(&train.y, &train_soft)?,
        test_r2_soft: r_squared(&test.y, &test_soft)?,
        seconds_total: trace.total_seconds,
        iterations: trace.iterations.clone(),
        failure: trace.failure.clone(),
        config: cfg.clone(),
    })
}

/// Mean and standard deviation of test R^2 and wall-clock over the runs of
/// one (dataset, algorithm) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub algorithm: Algorithm,
    pub runs: usize,
    pub mean_test_r2: f64,
    pub sd_test_r2: f64,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
}

pub fn aggregate(rows: &[RunReport]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, Algorithm)> = Vec::new();
    for row in rows {
        let key = (row.dataset.clone(), row.algorithm);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(dataset, algorithm)| {
            let cell: Vec<&RunReport> = rows
                .iter()
                .filter(|r| r.dataset == dataset && r.algorithm == algorithm)
                .collect();
            let r2: Vec<f64> = cell.iter().map(|r| r.test_r2).collect();
            let secs: Vec<f64> = cell.iter().map(|r| r.seconds_total).collect();
            AggregateRow {
                dataset,
                algorithm,
                runs: cell.len(),
                mean_test_r2: crate::linalg::mean(&r2),
                sd_test_r2: crate::linalg::population_variance(&r2).sqrt(),
                mean_seconds: crate::linalg::mean(&secs),
                sd_seconds: crate::linalg::population_variance(&secs).sqrt(),
            }
        })
        .collect()
}

/// Wall-clock scaling of one-pass training across dataset sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub sizes: Vec<usize>,
    pub seconds: Vec<f64>,
    /// Least-squares slope of log(seconds) against log(size).
    pub log_log_slope: f64,
}

pub fn log_log_slope(sizes: &[usize], seconds: &[f64]) -> f64 {
    debug_assert_eq!(sizes.len(), seconds.len());
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = seconds.iter().map(|&t| t.max(1e-9).ln()).collect();
    let mx = crate::linalg::mean(&xs);
    let my = crate::linalg::mean(&ys);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub rows: Vec<RunReport>,
    pub aggregates: Vec<AggregateRow>,
    pub scaling: Option<ScalingReport>,
}
