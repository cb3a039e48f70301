//! Command-line surface: data generation, training, prediction, and
//! benchmarking.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::clustering::ClusterConfig;
use crate::datasets::{gen_bernholdt, gen_higdon, load_csv, save_csv, train_test_split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::gating::GatingTrainConfig;
use crate::model::MoeModel;
use crate::model_io::{load_model, save_model};
use crate::report::{aggregate, build_report, log_log_slope, BenchmarkReport, RunReport, ScalingReport, REPORT_SCHEMA_VERSION};
use crate::trainer::{train, Algorithm, NumExperts, TrainConfig};

#[derive(Parser)]
#[command(
    name = "gpmoe",
    about = "Mixture of sparse Gaussian-process experts with a deep gating network",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV.
    GenData(GenDataArgs),
    /// Train a mixture on a CSV dataset and write the model and a report.
    Train(TrainArgs),
    /// Predict with a trained model on new inputs.
    Predict(PredictArgs),
    /// Run (dataset x algorithm x seed) training sweeps with aggregation.
    Benchmark(BenchmarkArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GeneratorName {
    Higdon,
    Bernholdt,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Which generator to draw from.
    #[arg(value_enum)]
    pub dataset: GeneratorName,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy)]
pub struct ExpertCount(pub NumExperts);

impl std::str::FromStr for ExpertCount {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(ExpertCount(NumExperts::Auto));
        }
        s.parse::<usize>()
            .map_err(|_| format!("expected an integer or \"auto\", got {s:?}"))
            .and_then(|l| {
                if l == 0 {
                    Err("expert count must be at least 1".to_string())
                } else {
                    Ok(ExpertCount(NumExperts::Fixed(l)))
                }
            })
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training data CSV (last column is the output).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub algorithm: String,
    /// Number of experts, or "auto" for the elbow rule.
    #[arg(long, default_value = "auto")]
    pub experts: ExpertCount,
    #[arg(long, default_value_t = 64)]
    pub max_inducing: usize,
    /// Output rescale weight for the joint clustering features.
    #[arg(long, default_value_t = 10.0)]
    pub kappa: f64,
    /// Maximum MM iterations.
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    /// Stop MM when the train R^2 gain falls below this.
    #[arg(long, default_value_t = 1e-4)]
    pub r2_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Largest candidate for the automatic expert count.
    #[arg(long, default_value_t = 8)]
    pub elbow_max: usize,
    /// Start MM from a random allocation instead of the CCR solution.
    #[arg(long, default_value_t = false)]
    pub random_init: bool,
    /// Keep the k-means labels for the regression step instead of
    /// re-allocating to the trained classifier.
    #[arg(long, default_value_t = false)]
    pub no_reallocate: bool,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PredictMode {
    Hard,
    Soft,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Input CSV: either d input columns, or d+1 with the output last
    /// (the output is ignored).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = PredictMode::Soft)]
    pub mode: PredictMode,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchmarkArgs {
    /// Dataset CSV; repeatable.
    #[arg(long, required_unless_present = "scaling")]
    pub data: Vec<PathBuf>,
    /// Comma-separated algorithms, e.g. "ccr,mm2r,mm".
    #[arg(long, default_value = "ccr,mm2r,mm")]
    pub algorithms: String,
    /// Comma-separated seeds, one run per seed.
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    #[arg(long, default_value = "auto")]
    pub experts: ExpertCount,
    #[arg(long, default_value_t = 64)]
    pub max_inducing: usize,
    #[arg(long, default_value_t = 10.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Also time one-pass training on generated two-regime data at
    /// N in {2000, 4000, 8000, 16000} and fit a log-log slope.
    #[arg(long, default_value_t = false)]
    pub scaling: bool,
    /// Write the full benchmark report (rows + aggregates) as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command; the returned code is the process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Benchmark(args) => cmd_benchmark(args),
    }
}

pub fn exit_code_for(error: &Error) -> i32 {
    match error {
        Error::InvalidArgument(_) | Error::Parse { .. } => 2,
        Error::Numerical(_) => 3,
        Error::Io(_) => 1,
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let ds = match args.dataset {
        GeneratorName::Higdon => gen_higdon(args.n, args.seed)?,
        GeneratorName::Bernholdt => gen_bernholdt(args.n, args.seed)?,
    };
    save_csv(&ds, &args.out)?;
    println!("wrote {} rows ({} inputs) to {}", ds.len(), ds.input_dim(), args.out.display());
    Ok(0)
}

fn train_config_from(args: &TrainArgs) -> Result<TrainConfig> {
    let algorithm: Algorithm = args.algorithm.parse()?;
    if args.elbow_max == 0 {
        return Err(Error::invalid("elbow range must contain at least one candidate"));
    }
    Ok(TrainConfig {
        algorithm,
        num_experts: args.experts.0,
        max_mm_iters: args.max_iters,
        r2_improvement_tol: args.r2_tol,
        cluster: ClusterConfig { output_weight: args.kappa, seed: args.seed, ..Default::default() },
        gating: GatingTrainConfig { seed: args.seed, ..Default::default() },
        max_inducing: args.max_inducing,
        elbow_range: (1..=args.elbow_max).collect(),
        ccr_reallocate: !args.no_reallocate,
        mm_random_init: args.random_init,
        seed: args.seed,
        ..Default::default()
    })
}

/// Splits, trains, and evaluates one configuration on one dataset.
pub fn run_training(ds: &Dataset, cfg: &TrainConfig, split: &SplitSpec) -> Result<(MoeModel, RunReport)> {
    let (train_ds, test_ds) = train_test_split(ds, split)?;
    let (model, trace) = train(&train_ds.x, &train_ds.y, cfg)?;
    let report = build_report(&model, &trace, cfg, &train_ds, &test_ds)?;
    Ok((model, report))
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let cfg = train_config_from(&args)?;
    let ds = load_csv(&args.data)?;
    let split = SplitSpec { train_fraction: args.train_fraction, seed: args.seed };
    let (model, report) = run_training(&ds, &cfg, &split)?;

    save_model(&model, &args.out_model)?;
    if let Some(path) = &args.out_report {
        std::fs::write(path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    println!(
        "{} on {}: L={} test R^2 = {:.4} (soft {:.4}), wall-clock {:.2}s",
        report.algorithm,
        report.dataset,
        report.num_experts,
        report.test_r2,
        report.test_r2_soft,
        report.seconds_total
    );
    if let Some(failure) = &report.failure {
        eprintln!("training stopped early on a numerical failure: {failure}");
        eprintln!("the written model and report reflect the last good state");
        return Ok(3);
    }
    Ok(0)
}

/// Reads prediction inputs: exactly `d` columns, or `d + 1` when the file
/// carries an output column, which is ignored.
fn load_inputs(path: &PathBuf, input_dim: usize) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.len() != input_dim && headers.len() != input_dim + 1 {
        return Err(Error::invalid(format!(
            "model expects {input_dim} inputs; file has {} columns",
            headers.len()
        )));
    }
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let mut row = Vec::with_capacity(input_dim);
        for field in record.iter().take(input_dim) {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric cell {field:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite cell {field:?}") });
            }
            row.push(value);
        }
        if row.len() != input_dim {
            return Err(Error::Parse {
                line,
                message: format!("expected {input_dim} inputs, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 2, message: "no data rows".to_string() });
    }
    let x = DMatrix::from_fn(rows.len(), input_dim, |r, c| rows[r][c]);
    Ok((x, headers[..input_dim].to_vec()))
}

fn cmd_predict(args: PredictArgs) -> Result<i32> {
    let model = load_model(&args.model)?;
    let (x, names) = load_inputs(&args.data, model.input_dim())?;
    let predictor = model.predictor()?;
    let l = model.num_experts();

    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    let gate_names: Vec<String> = (1..=l).map(|j| format!("g_{j}")).collect();
    match args.mode {
        PredictMode::Soft => {
            writeln!(out, "{},mean,sd,{}", names.join(","), gate_names.join(","))?
        }
        PredictMode::Hard => {
            writeln!(out, "{},mean,sd,{},expert", names.join(","), gate_names.join(","))?
        }
    }
    for i in 0..x.nrows() {
        let point: Vec<f64> = (0..x.ncols()).map(|c| x[(i, c)]).collect();
        for v in &point {
            write!(out, "{v},")?;
        }
        match args.mode {
            PredictMode::Soft => {
                let p = predictor.predict_soft(&point)?;
                write!(out, "{},{}", p.mean, p.variance.max(0.0).sqrt())?;
                for g in p.gates.iter() {
                    write!(out, ",{g}")?;
                }
                writeln!(out)?;
            }
            PredictMode::Hard => {
                let p = predictor.predict_hard(&point)?;
                write!(out, "{},{}", p.mean, p.variance.max(0.0).sqrt())?;
                for g in p.gates.iter() {
                    write!(out, ",{g}")?;
                }
                // 1-based expert index in the external format.
                writeln!(out, ",{}", p.expert + 1)?;
            }
        }
    }
    println!("wrote {} predictions to {}", x.nrows(), args.out.display());
    Ok(0)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = text.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::invalid(format!("empty {what} list")));
    }
    items
        .into_iter()
        .map(|s| s.parse::<T>().map_err(|_| Error::invalid(format!("bad {what} entry {s:?}"))))
        .collect()
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<i32> {
    let algorithms: Vec<Algorithm> = parse_list(&args.algorithms, "algorithm")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;

    let mut rows: Vec<RunReport> = Vec::new();
    for path in &args.data {
        let ds = load_csv(path)?;
        for &algorithm in &algorithms {
            for &seed in &seeds {
                let cfg = TrainConfig {
                    algorithm,
                    num_experts: args.experts.0,
                    max_mm_iters: args.max_iters,
                    cluster: ClusterConfig {
                        output_weight: args.kappa,
                        seed,
                        ..Default::default()
                    },
                    gating: GatingTrainConfig { seed, ..Default::default() },
                    max_inducing: args.max_inducing,
                    seed,
                    ..Default::default()
                };
                let split = SplitSpec { train_fraction: args.train_fraction, seed };
                let (_, report) = run_training(&ds, &cfg, &split)?;
                println!(
                    "{} {} seed={}: L={} test R^2 = {:.4}, {:.2}s",
                    report.dataset,
                    report.algorithm,
                    seed,
                    report.num_experts,
                    report.test_r2,
                    report.seconds_total
                );
                rows.push(report);
            }
        }
    }

    let aggregates = aggregate(&rows);
    for agg in &aggregates {
        println!(
            "{} {}: mean test R^2 = {:.4} +- {:.4}, mean wall-clock = {:.2}s +- {:.2}s ({} runs)",
            agg.dataset,
            agg.algorithm,
            agg.mean_test_r2,
            agg.sd_test_r2,
            agg.mean_seconds,
            agg.sd_seconds,
            agg.runs
        );
    }

    let scaling = if args.scaling { Some(run_scaling(args.max_inducing)?) } else { None };
    if let Some(s) = &scaling {
        println!(
            "scaling: sizes {:?}, seconds {:?}, log-log slope {:.3}",
            s.sizes,
            s.seconds.iter().map(|t| (t * 100.0).round() / 100.0).collect::<Vec<_>>(),
            s.log_log_slope
        );
    }

    if let Some(path) = &args.out {
        let report = BenchmarkReport {
            schema_version: REPORT_SCHEMA_VERSION,
            rows,
            aggregates,
            scaling,
        };
        std::fs::write(path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(0)
}

/// One-pass training wall-clock across sizes. The gate epoch budget is
/// pinned (no early-stopping variance) so the timing reflects data size.
pub fn run_scaling(max_inducing: usize) -> Result<ScalingReport> {
    let sizes = vec![2000usize, 4000, 8000, 16000];
    let mut seconds = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let ds = gen_higdon(n, 1234)?;
        let cfg = TrainConfig {
            algorithm: Algorithm::Ccr,
            num_experts: NumExperts::Fixed(2),
            gating: GatingTrainConfig {
                max_epochs: 150,
                patience: 150,
                seed: 1234,
                ..Default::default()
            },
            max_inducing,
            seed: 1234,
            ..Default::default()
        };
        let split = SplitSpec { train_fraction: 0.8, seed: 1234 };
        let start = std::time::Instant::now();
        let _ = run_training(&ds, &cfg, &split)?;
        seconds.push(start.elapsed().as_secs_f64());
    }
    let slope = log_log_slope(&sizes, &seconds);
    Ok(ScalingReport { sizes, seconds, log_log_slope: slope })
}
