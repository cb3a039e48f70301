//! End-to-end tests of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gpmoe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gpmoe"))
}

fn run(args: &[&str]) -> Output {
    gpmoe().args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn gen_higdon_csv(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("higdon_{n}_{seed}.csv"));
    let output = run(&[
        "gen-data",
        "higdon",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path_str(&out),
    ]);
    assert!(output.status.success(), "gen-data failed: {output:?}");
    out
}

#[test]
fn gen_data_is_deterministic_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_higdon_csv(dir.path(), 1000, 7);
    let content_a = std::fs::read(&a).unwrap();
    assert_eq!(content_a.iter().filter(|&&b| b == b'\n').count(), 1001);

    let b = dir.path().join("again.csv");
    run(&["gen-data", "higdon", "--n", "1000", "--seed", "7", "--out", path_str(&b)]);
    let content_b = std::fs::read(&b).unwrap();
    assert_eq!(content_a, content_b, "same flags must give byte-identical files");

    let c = dir.path().join("plateaus.csv");
    let out = run(&["gen-data", "bernholdt", "--n", "50", "--out", path_str(&c)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&c).unwrap();
    assert!(text.starts_with("x_1,x_2,y\n"));
}

#[test]
fn gen_data_unwritable_path_fails_nonzero() {
    let out = run(&[
        "gen-data",
        "higdon",
        "--n",
        "10",
        "--out",
        "/nonexistent-dir/nope/data.csv",
    ]);
    assert!(!out.status.success());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let out = run(&["train", "--algorithm", "warp"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_higdon_csv(dir.path(), 400, 3);
    let model_path = dir.path().join("model.json");
    let report_path = dir.path().join("report.json");

    let out = run(&[
        "train",
        "--data",
        path_str(&data),
        "--algorithm",
        "ccr",
        "--experts",
        "2",
        "--seed",
        "3",
        "--out-model",
        path_str(&model_path),
        "--out-report",
        path_str(&report_path),
    ]);
    assert!(out.status.success(), "train failed: {out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("test R^2"), "summary missing: {stdout}");

    // The report is valid JSON with the documented fields.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["num_experts"], 2);
    assert_eq!(report["n_train"], 320);
    assert_eq!(report["n_test"], 80);
    assert!(report["test_r2"].as_f64().unwrap() <= 1.0);
    assert!(report["seconds_total"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["config"]["seed"], 3);

    // The model loads back and predicts.
    let model = gpmoe::model_io::load_model(&model_path).unwrap();
    assert_eq!(model.num_experts(), 2);

    // Soft predictions: columns = d + 2 + L.
    let pred_path = dir.path().join("pred_soft.csv");
    let out = run(&[
        "predict",
        "--model",
        path_str(&model_path),
        "--data",
        path_str(&data),
        "--mode",
        "soft",
        "--out",
        path_str(&pred_path),
    ]);
    assert!(out.status.success(), "predict failed: {out:?}");
    let text = std::fs::read_to_string(&pred_path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, "x_1,mean,sd,g_1,g_2");
    let first = lines.next().unwrap();
    assert_eq!(first.split(',').count(), 1 + 2 + 2);
    // Gates sum to one.
    let fields: Vec<f64> = first.split(',').map(|v| v.parse().unwrap()).collect();
    assert!((fields[3] + fields[4] - 1.0).abs() < 1e-9);

    // Hard predictions add the 1-based expert column.
    let pred_hard = dir.path().join("pred_hard.csv");
    let out = run(&[
        "predict",
        "--model",
        path_str(&model_path),
        "--data",
        path_str(&data),
        "--mode",
        "hard",
        "--out",
        path_str(&pred_hard),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&pred_hard).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x_1,mean,sd,g_1,g_2,expert");
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 1 + 2 + 2 + 1);
        let expert: usize = fields[5].parse().unwrap();
        assert!(expert == 1 || expert == 2);
    }
}

#[test]
fn train_single_expert_degenerates_to_one_gp() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_higdon_csv(dir.path(), 400, 5);
    let model_path = dir.path().join("model1.json");
    let report_path = dir.path().join("report1.json");
    let out = run(&[
        "train",
        "--data",
        path_str(&data),
        "--algorithm",
        "ccr",
        "--experts",
        "1",
        "--seed",
        "5",
        "--out-model",
        path_str(&model_path),
        "--out-report",
        path_str(&report_path),
    ]);
    assert!(out.status.success());
    let model = gpmoe::model_io::load_model(&model_path).unwrap();
    assert_eq!(model.num_experts(), 1);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    // A single GP already fits this curve close to the noise ceiling.
    assert!(report["test_r2"].as_f64().unwrap() > 0.9);

    // In soft mode the lone gate column is identically one.
    let pred = dir.path().join("pred1.csv");
    run(&[
        "predict", "--model", path_str(&model_path), "--data", path_str(&data),
        "--mode", "soft", "--out", path_str(&pred),
    ]);
    let text = std::fs::read_to_string(&pred).unwrap();
    for line in text.lines().skip(1) {
        let g: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(g, 1.0);
    }
}

#[test]
fn predict_dimension_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_higdon_csv(dir.path(), 120, 1);
    let model_path = dir.path().join("m.json");
    let out = run(&[
        "train", "--data", path_str(&data), "--algorithm", "ccr", "--experts", "2",
        "--seed", "1", "--out-model", path_str(&model_path),
    ]);
    assert!(out.status.success());

    // Three columns: too many for a 1-input model.
    let wide = dir.path().join("wide.csv");
    std::fs::write(&wide, "a,b,c,y\n1,2,3,4\n").unwrap();
    let out = run(&[
        "predict", "--model", path_str(&model_path), "--data", path_str(&wide),
        "--mode", "soft", "--out", path_str(&dir.path().join("p.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_rejects_malformed_csv_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x,y\n1,2\n3,abc\n").unwrap();
    let out = run(&[
        "train", "--data", path_str(&bad), "--algorithm", "ccr",
        "--out-model", path_str(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "error should name the line: {stderr}");
}

#[test]
fn train_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_higdon_csv(dir.path(), 300, 9);
    let m1 = dir.path().join("m1.json");
    let m2 = dir.path().join("m2.json");
    for m in [&m1, &m2] {
        let out = run(&[
            "train", "--data", path_str(&data), "--algorithm", "ccr", "--experts", "2",
            "--seed", "7", "--out-model", path_str(m),
        ]);
        assert!(out.status.success());
    }
    assert_eq!(
        std::fs::read(&m1).unwrap(),
        std::fs::read(&m2).unwrap(),
        "identical seeds must produce identical serialized models"
    );
}

#[test]
fn benchmark_produces_rows_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_higdon_csv(dir.path(), 300, 2);
    let out_path = dir.path().join("bench.json");
    let out = run(&[
        "benchmark",
        "--data",
        path_str(&data),
        "--algorithms",
        "ccr,mm2r",
        "--seeds",
        "1,2",
        "--experts",
        "2",
        "--out",
        path_str(&out_path),
    ]);
    assert!(out.status.success(), "benchmark failed: {out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4, "2 algorithms x 2 seeds");
    let aggs = report["aggregates"].as_array().unwrap();
    assert_eq!(aggs.len(), 2);
    for agg in aggs {
        assert_eq!(agg["runs"], 2);
        assert!(agg["mean_test_r2"].as_f64().unwrap() <= 1.0);
    }
}

#[test]
fn benchmark_refined_beats_one_pass_on_most_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_higdon_csv(dir.path(), 300, 4);
    let out_path = dir.path().join("bench.json");
    let out = run(&[
        "benchmark",
        "--data",
        path_str(&data),
        "--algorithms",
        "ccr,mm",
        "--seeds",
        "1,2,3",
        "--experts",
        "2",
        "--out",
        path_str(&out_path),
    ]);
    assert!(out.status.success(), "benchmark failed: {out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let r2_of = |alg: &str, seed: u64| -> f64 {
        rows.iter()
            .find(|r| r["algorithm"] == alg && r["seed"] == seed)
            .unwrap()["test_r2"]
            .as_f64()
            .unwrap()
    };
    let wins = (1..=3)
        .filter(|&seed| r2_of("mm", seed) >= r2_of("ccr", seed) - 1e-9)
        .count();
    assert!(wins >= 2, "refined training beat one-pass on only {wins}/3 seeds");
}

#[test]
fn benchmark_empty_algorithm_list_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_higdon_csv(dir.path(), 120, 2);
    let out = run(&["benchmark", "--data", path_str(&data), "--algorithms", ",,"]);
    assert_eq!(out.status.code(), Some(2));
}
