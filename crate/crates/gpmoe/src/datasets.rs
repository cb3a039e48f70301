//! Synthetic data generators, CSV ingestion, and train/test splitting.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `N x d` input matrix.
    pub x: DMatrix<f64>,
    /// Output vector of length `N`.
    pub y: DVector<f64>,
    pub name: String,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, name: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "{} input rows for {} outputs",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Self { x, y, name: name.into(), feature_names: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    fn subset(&self, idx: &[usize], suffix: &str) -> Dataset {
        Dataset {
            x: DMatrix::from_fn(idx.len(), self.x.ncols(), |r, c| self.x[(idx[r], c)]),
            y: DVector::from_fn(idx.len(), |r, _| self.y[idx[r]]),
            name: format!("{}{suffix}", self.name),
            feature_names: self.feature_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 0 }
    }
}

/// Two-regime test function: oscillatory below 10, linear above.
pub fn higdon_mean(x: f64) -> f64 {
    if x < 10.0 {
        (std::f64::consts::PI * x / 5.0).sin() + 0.2 * (4.0 * std::f64::consts::PI * x / 5.0).cos()
    } else {
        x / 10.0 - 1.0
    }
}

pub const HIGDON_NOISE_SD: f64 = 0.1;

/// Inputs uniform on [0, 20], outputs `higdon_mean` plus N(0, 0.1^2) noise.
pub fn gen_higdon(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(0.0..20.0));
    let y = DVector::from_fn(n, |i, _| {
        higdon_mean(x[(i, 0)])
            + HIGDON_NOISE_SD * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    Dataset::new(x, y, "higdon")
}

/// Smoothed four-level staircase on [-4, 10]; the product `g(x1) g(x2)`
/// makes a grid of near-constant plateaus.
pub fn staircase_g(t: f64) -> f64 {
    const KNOTS: [f64; 3] = [-1.0, 3.0, 7.0];
    1.0 + KNOTS.iter().map(|c| (8.0 * (t - c)).tanh()).sum::<f64>()
}

/// Plateau-product mean of the staircase surface.
pub fn staircase_product_mean(x1: f64, x2: f64) -> f64 {
    staircase_g(x1) * staircase_g(x2)
}

/// Distinct plateau products of the staircase surface, for regime counting.
pub fn staircase_regime_values() -> Vec<f64> {
    let levels = [-2.0, 0.0, 2.0, 4.0];
    let mut values: Vec<f64> = levels
        .iter()
        .flat_map(|a| levels.iter().map(move |b| a * b))
        .collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    values
}

/// Noise standard deviation: 2% of the output range of the surface.
pub fn staircase_noise_sd() -> f64 {
    let g_min = staircase_g(-4.0);
    let g_max = staircase_g(10.0);
    let f_max = (g_min * g_min).max(g_max * g_max);
    let f_min = (g_min * g_max).min(0.0);
    0.02 * (f_max - f_min)
}

/// Inputs uniform on [-4, 10]^2, outputs the plateau-product surface plus
/// Gaussian noise.
pub fn gen_bernholdt(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-4.0..10.0));
    let sd = staircase_noise_sd();
    let y = DVector::from_fn(n, |i, _| {
        staircase_product_mean(x[(i, 0)], x[(i, 1)])
            + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    Dataset::new(x, y, "bernholdt")
}

/// Loads a CSV with a header row; the last column is the output, all
/// preceding columns are numeric inputs.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("cannot open {}: {e}", path.display()),
            )),
            _ => Error::Parse { line: 1, message: e.to_string() },
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: format!("need at least one input column and one output, got {} columns", headers.len()),
        });
    }
    let d = headers.len() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(headers.len());
        for field in record.iter() {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric cell {field:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite cell {field:?}"),
                });
            }
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 2, message: "no data rows".to_string() });
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |r, c| rows[r][c]);
    let y = DVector::from_fn(n, |r, _| rows[r][d]);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "csv".to_string());
    let mut ds = Dataset::new(x, y, name)?;
    ds.feature_names = Some(headers[..d].to_vec());
    Ok(ds)
}

/// Writes a dataset as UTF-8 comma-separated values with a header row;
/// numbers use the shortest representation that round-trips exactly.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = ds.input_dim();
    let names: Vec<String> = match &ds.feature_names {
        Some(names) if names.len() == d => names.clone(),
        _ => (1..=d).map(|i| format!("x_{i}")).collect(),
    };
    writeln!(file, "{},y", names.join(","))?;
    for r in 0..ds.len() {
        for c in 0..d {
            write!(file, "{},", ds.x[(r, c)])?;
        }
        writeln!(file, "{}", ds.y[r])?;
    }
    Ok(())
}

/// Disjoint seeded split with `round(train_fraction * N)` training rows.
pub fn train_test_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::invalid("need at least two rows to split"));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid("train fraction must lie strictly between 0 and 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let k = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut train_idx = idx[..k].to_vec();
    let mut test_idx = idx[k..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx, "_train"), ds.subset(&test_idx, "_test")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn higdon_mean_branch_values() {
        assert_relative_eq!(higdon_mean(10.0), 0.0, epsilon = 1e-12);
        assert_relative_eq!(higdon_mean(2.5), 1.2, epsilon = 1e-12);
    }

    #[test]
    fn higdon_noise_is_centered_and_scaled() {
        let n = 100_000;
        let ds = gen_higdon(n, 123).unwrap();
        let residuals: Vec<f64> =
            (0..n).map(|i| ds.y[i] - higdon_mean(ds.x[(i, 0)])).collect();
        let mean = crate::linalg::mean(&residuals);
        assert!(mean.abs() <= 0.01, "residual mean {mean}");
        let sd = crate::linalg::population_variance(&residuals).sqrt();
        assert!((0.09..=0.11).contains(&sd), "residual sd {sd}");
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_higdon(50, 9).unwrap();
        let b = gen_higdon(50, 9).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        let c = gen_bernholdt(50, 9).unwrap();
        let d = gen_bernholdt(50, 9).unwrap();
        assert_eq!(c.x, d.x);
        assert_eq!(c.y, d.y);
    }

    #[test]
    fn staircase_plateau_centers_hit_levels() {
        // Mid-plateau points sit on the product of the step levels.
        let centers = [-2.5, 1.0, 5.0, 8.5];
        let levels = [-2.0, 0.0, 2.0, 4.0];
        for (c, l) in centers.iter().zip(levels) {
            assert_relative_eq!(staircase_g(*c), l, epsilon = 1e-9);
        }
        assert_relative_eq!(staircase_product_mean(-2.5, 8.5), -8.0, epsilon = 1e-8);
    }

    #[test]
    fn staircase_is_separable() {
        let (a, b, c, d) = (-2.0, 0.5, 4.2, 9.0);
        let lhs = staircase_product_mean(a, b) * staircase_product_mean(c, d);
        let rhs = staircase_product_mean(a, d) * staircase_product_mean(c, b);
        assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn staircase_regimes_are_distinguishable_at_five_sigma() {
        let values = staircase_regime_values();
        assert_eq!(values, vec![-8.0, -4.0, 0.0, 4.0, 8.0, 16.0]);
        let sd = staircase_noise_sd();
        assert_relative_eq!(sd, 0.02 * 24.0, epsilon = 1e-9);
        let distinguishable = values
            .windows(2)
            .filter(|w| w[1] - w[0] >= 5.0 * sd)
            .count();
        // Every adjacent pair is at least 5 sigma apart, so all six regimes
        // are distinguishable.
        assert!(distinguishable + 1 >= 4);
        assert_eq!(distinguishable + 1, values.len());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = gen_bernholdt(25, 4).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.len(), 25);
        assert_eq!(back.input_dim(), 2);
        for i in 0..25 {
            assert_eq!(back.y[i], ds.y[i]);
            for c in 0..2 {
                assert_eq!(back.x[(i, c)], ds.x[(i, c)]);
            }
        }
    }

    #[test]
    fn csv_small_file_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.csv");
        std::fs::write(&path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.feature_names.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x,y\n1,2\n3,NaN\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let path2 = dir.path().join("bad2.csv");
        std::fs::write(&path2, "x,y\n1,2\nhello,3\n").unwrap();
        match load_csv(&path2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(load_csv(dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = gen_higdon(10, 0).unwrap();
        let spec = SplitSpec { train_fraction: 0.8, seed: 42 };
        let (train, test) = train_test_split(&ds, &spec).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);

        // Union matches the original multiset of rows.
        let mut seen: Vec<f64> = train.y.iter().chain(test.y.iter()).copied().collect();
        let mut original: Vec<f64> = ds.y.iter().copied().collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        original.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, original);

        let (train2, test2) = train_test_split(&ds, &spec).unwrap();
        assert_eq!(train.y, train2.y);
        assert_eq!(test.y, test2.y);
    }
}
