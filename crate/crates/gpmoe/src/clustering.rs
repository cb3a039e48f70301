//! Joint (y, x) k-means for the one-pass clustering step, plus the elbow
//! heuristic for choosing the number of experts.
//!
//! Seeding is k-means++ with the weighted draw implemented as an exponential
//! race keyed by a hash of each point's coordinates. Keys depend on data
//! values, never on row positions, so the clustering is invariant (up to
//! label permutation) under permutations of the input rows.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Rescale factor applied to the standardized output column.
    pub output_weight: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { output_weight: 10.0, max_iters: 100, restarts: 5, seed: 0 }
    }
}

/// Per-column affine transform recorded by [`standardize`].
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                out[(r, c)] = (m[(r, c)] - self.means[c]) / self.scales[c];
            }
        }
        out
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                out[(r, c)] = m[(r, c)] * self.scales[c] + self.means[c];
            }
        }
        out
    }
}

/// Column-wise standardization: non-constant columns to mean 0 and unit
/// sample standard deviation, constant columns to 0.
pub fn standardize(m: &DMatrix<f64>) -> (DMatrix<f64>, Standardizer) {
    let n = m.nrows();
    let mut means = Vec::with_capacity(m.ncols());
    let mut scales = Vec::with_capacity(m.ncols());
    for c in 0..m.ncols() {
        let col = m.column(c);
        let mean = col.sum() / n as f64;
        let sd = if n > 1 {
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let constant = sd <= 1e-12 * (1.0 + mean.abs());
        means.push(mean);
        scales.push(if constant { 1.0 } else { sd });
    }
    let std = Standardizer { means, scales };
    (std.apply(m), std)
}

/// Joint clustering features: standardized input columns followed by the
/// standardized output scaled by `output_weight`.
pub fn build_joint_features(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ClusterConfig,
) -> Result<DMatrix<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::invalid(format!(
            "joint features: {} input rows vs {} outputs",
            x.nrows(),
            y.len()
        )));
    }
    if !(cfg.output_weight > 0.0 && cfg.output_weight.is_finite()) {
        return Err(Error::invalid("output weight must be positive and finite"));
    }
    let (x_std, _) = standardize(x);
    let y_mat = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let (y_std, _) = standardize(&y_mat);
    let mut out = DMatrix::zeros(x.nrows(), x.ncols() + 1);
    out.view_mut((0, 0), (x.nrows(), x.ncols())).copy_from(&x_std);
    for r in 0..x.nrows() {
        out[(r, x.ncols())] = cfg.output_weight * y_std[(r, 0)];
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Cluster index per row, in `0..l`.
    pub labels: Vec<usize>,
    /// `l x k` matrix of cluster centers.
    pub centers: DMatrix<f64>,
    /// Sum of squared distances to assigned centers.
    pub inertia: f64,
    /// Inertia after each Lloyd assignment, for the best restart.
    pub inertia_trace: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding; best of `cfg.restarts` by inertia.
pub fn kmeans(points: &DMatrix<f64>, l: usize, cfg: &ClusterConfig) -> Result<KmeansResult> {
    let n = points.nrows();
    if l == 0 {
        return Err(Error::invalid("kmeans: number of clusters must be at least 1"));
    }
    if n < l {
        return Err(Error::invalid(format!("kmeans: {n} points for {l} clusters")));
    }
    let runs: Vec<KmeansResult> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|restart| lloyd(points, l, cfg, restart as u64))
        .collect();
    let best = runs
        .into_iter()
        .min_by(|a, b| a.inertia.partial_cmp(&b.inertia).expect("finite inertia"))
        .expect("at least one restart");
    Ok(best)
}

fn lloyd(points: &DMatrix<f64>, l: usize, cfg: &ClusterConfig, restart: u64) -> KmeansResult {
    let n = points.nrows();
    let k = points.ncols();
    let mut centers = seed_centers(points, l, cfg.seed, restart);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut trace = Vec::new();

    for _ in 0..cfg.max_iters.max(1) {
        let changed = assign(points, &centers, &mut labels, &mut dists);
        repair_empty_clusters(points, &mut centers, &mut labels, &mut dists, l);
        trace.push(dists.iter().sum());

        // Update step.
        let mut sums = DMatrix::<f64>::zeros(l, k);
        let mut counts = vec![0usize; l];
        for i in 0..n {
            counts[labels[i]] += 1;
            for c in 0..k {
                sums[(labels[i], c)] += points[(i, c)];
            }
        }
        for j in 0..l {
            if counts[j] > 0 {
                for c in 0..k {
                    centers[(j, c)] = sums[(j, c)] / counts[j] as f64;
                }
            }
        }
        if !changed && trace.len() > 1 {
            break;
        }
    }
    // Final assignment against the last centers so the result is a fixed point.
    assign(points, &centers, &mut labels, &mut dists);
    repair_empty_clusters(points, &mut centers, &mut labels, &mut dists, l);
    let inertia = dists.iter().sum();
    trace.push(inertia);
    KmeansResult { labels, centers, inertia, inertia_trace: trace }
}

/// Assigns every point to its nearest center (ties to the smallest index).
/// Returns whether any label changed.
fn assign(
    points: &DMatrix<f64>,
    centers: &DMatrix<f64>,
    labels: &mut [usize],
    dists: &mut [f64],
) -> bool {
    let mut changed = false;
    for i in 0..points.nrows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..centers.nrows() {
            let d = crate::linalg::row_sq_dist(points, i, centers, j);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if labels[i] != best {
            labels[i] = best;
            changed = true;
        }
        dists[i] = best_d;
    }
    changed
}

/// Re-seeds every empty cluster at the point farthest from its assigned
/// center; ties are broken by coordinate hash so the rule does not depend
/// on row order.
fn repair_empty_clusters(
    points: &DMatrix<f64>,
    centers: &mut DMatrix<f64>,
    labels: &mut [usize],
    dists: &mut [f64],
    l: usize,
) {
    let n = points.nrows();
    loop {
        let mut counts = vec![0usize; l];
        for &lab in labels.iter() {
            counts[lab] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = 0usize;
        let mut far_key = (f64::NEG_INFINITY, 0u64);
        for i in 0..n {
            if counts[labels[i]] <= 1 {
                continue; // do not empty a singleton cluster
            }
            let key = (dists[i], point_hash(points, i, 0, 0, 0));
            if key > far_key {
                far_key = key;
                far = i;
            }
        }
        for c in 0..points.ncols() {
            centers[(empty, c)] = points[(far, c)];
        }
        labels[far] = empty;
        dists[far] = 0.0;
    }
}

/// k-means++ seeding; the weighted draw over squared distances is an
/// exponential race with data-keyed uniforms.
fn seed_centers(points: &DMatrix<f64>, l: usize, seed: u64, restart: u64) -> DMatrix<f64> {
    let n = points.nrows();
    let k = points.ncols();
    let mut centers = DMatrix::zeros(l, k);
    let mut min_d2 = vec![f64::INFINITY; n];

    for round in 0..l {
        let mut best = None;
        let mut best_score = f64::INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            let weight = if round == 0 { 1.0 } else { d2 };
            if weight <= 0.0 {
                continue;
            }
            let u = unit_from_hash(point_hash(points, i, seed, restart, round as u64));
            let score = -u.ln() / weight;
            if score < best_score {
                best_score = score;
                best = Some(i);
            }
        }
        // All remaining distances zero: fewer distinct points than centers.
        let chosen = best.unwrap_or(round % n);
        for c in 0..k {
            centers[(round, c)] = points[(chosen, c)];
        }
        for (i, slot) in min_d2.iter_mut().enumerate() {
            let d = crate::linalg::row_sq_dist(points, i, &centers, round);
            if d < *slot {
                *slot = d;
            }
        }
    }
    centers
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn point_hash(points: &DMatrix<f64>, row: usize, seed: u64, restart: u64, round: u64) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(restart ^ splitmix64(round ^ 0xabcd_ef01)));
    for c in 0..points.ncols() {
        h = splitmix64(h ^ points[(row, c)].to_bits());
    }
    h
}

/// Maps a hash to (0, 1].
fn unit_from_hash(h: u64) -> f64 {
    ((h >> 11) as f64 + 1.0) / (9_007_199_254_740_992.0 + 1.0)
}

/// Elbow choice of the cluster count: the interior candidate with the
/// largest second difference of inertia, normalized by the local slope so
/// knees late in the curve are not drowned out by the large early drops.
pub fn elbow_select_l(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    l_range: &[usize],
    cfg: &ClusterConfig,
) -> Result<usize> {
    if l_range.is_empty() {
        return Err(Error::invalid("elbow: empty candidate range"));
    }
    if l_range.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("elbow: candidate range must be strictly ascending"));
    }
    let features = build_joint_features(x, y, cfg)?;
    let inertias: Vec<f64> = l_range
        .iter()
        .map(|&l| kmeans(&features, l, cfg).map(|r| r.inertia))
        .collect::<Result<_>>()?;
    Ok(elbow_from_inertias(l_range, &inertias))
}

pub(crate) fn elbow_from_inertias(l_range: &[usize], inertias: &[f64]) -> usize {
    debug_assert_eq!(l_range.len(), inertias.len());
    if l_range.len() < 3 {
        return l_range[0];
    }
    let n = l_range.len();
    // Slope floor: 0.5% of the total decay, so near-flat or non-monotone
    // tails (k-means local-optimum noise) cannot dominate the statistic.
    let floor = (0.005 * (inertias[0] - inertias[n - 1])).max(1e-12 * inertias[0].max(1.0));
    let mut best_l = l_range[1];
    let mut best_score = f64::NEG_INFINITY;
    for j in 1..n - 1 {
        let drop_in = (inertias[j - 1] - inertias[j]).max(0.0);
        let drop_out = (inertias[j] - inertias[j + 1]).max(floor);
        // Equals 1 + (second difference) / (local slope).
        let score = drop_in / drop_out;
        if score > best_score {
            best_score = score;
            best_l = l_range[j];
        }
    }
    best_l
}
