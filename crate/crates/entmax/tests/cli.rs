use std::path::Path;
use std::process::{Command, Output};

use entmax::io::TransformOutput;
use entmax_core::analysis::MetricReport;

fn entmax(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entmax")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn transform_single_vector() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("vec.json");
    std::fs::write(&input, "[10, 0]").unwrap();
    let out = entmax(&["transform", "--alpha", "1.5", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let parsed: TransformOutput = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(parsed.probs, vec![1.0, 0.0]);
    assert_eq!(parsed.tau, 4.0);
    assert_eq!(parsed.support, vec![0]);
}

#[test]
fn transform_batch() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("batch.json");
    std::fs::write(&input, "[[0.7, 0.3], [1.5, 0.5, -0.5]]").unwrap();
    let out = entmax(&["transform", "--alpha", "2", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let parsed: Vec<TransformOutput> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(parsed.len(), 2);
    assert_eq!(parsed[0].tau, 0.0);
    assert_eq!(parsed[1].probs, vec![1.0, 0.0, 0.0]);
    assert_eq!(parsed[1].tau, 0.5);
}

#[test]
fn transform_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.json");
    std::fs::write(&input, "{\"z\": 1}").unwrap();
    let out = entmax(&["transform", "--alpha", "1.5", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&input, "[1, 2]").unwrap();
    let out = entmax(&["transform", "--alpha", "0.5", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = entmax(&["transform", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--alpha"));
}

#[test]
fn gradcheck_passes_and_reports_trials() {
    let out =
        entmax(&["gradcheck", "--alpha", "1.3", "--dim", "8", "--trials", "100", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["passed"], true);
    assert_eq!(v["entmax"]["trials"].as_array().unwrap().len(), 100);
    assert!(String::from_utf8_lossy(&out.stderr).contains("PASS"));
}

#[test]
fn gradcheck_with_block() {
    let out = entmax(&["gradcheck", "--alpha", "1.7", "--dim", "4", "--trials", "3", "--block"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["block"]["passed"], true);
}

#[test]
fn unknown_subcommand_and_flags_exit_2() {
    assert_eq!(entmax(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(entmax(&[]).status.code(), Some(2));
    let out = entmax(&["gradcheck", "--alpha", "1.5", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

fn small_train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--out",
        dir.to_str().unwrap(),
        "--steps",
        "10",
        "--set",
        "n_train=32",
        "--set",
        "n_eval=3",
        "--set",
        "layers=1",
        "--set",
        "heads=2",
        "--set",
        "model_dim=8",
        "--set",
        "head_dim=4",
        "--set",
        "seq_len=6",
    ];
    args.extend_from_slice(extra);
    entmax(&args)
}

#[test]
fn train_writes_a_run_directory_that_analyze_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = small_train(&run, &["--task", "cluster-sum", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_json(&out)["tokens_per_sec"].as_f64().unwrap() > 0.0);
    for name in
        ["config.snapshot", "alpha_trajectory.csv", "report.json", "model.json", "clusters.json"]
    {
        assert!(run.join(name).is_file(), "{name}");
    }
    let snapshot = std::fs::read_to_string(run.join("config.snapshot")).unwrap();
    assert!(snapshot.contains("task = cluster-sum\n"));
    assert!(snapshot.contains("seed = 3\n"));

    let report_path = dir.path().join("again.json");
    let csv_dir = dir.path().join("csv");
    let out = entmax(&[
        "analyze",
        "--tensors",
        run.join("tensors").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
        "--csv",
        csv_dir.to_str().unwrap(),
        "--clusters",
        run.join("clusters.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let original = std::fs::read(run.join("report.json")).unwrap();
    assert_eq!(std::fs::read(&report_path).unwrap(), original);
    let report: MetricReport = serde_json::from_slice(&original).unwrap();
    assert!(report.cluster_scores.is_some());

    let density = std::fs::read_to_string(csv_dir.join("density.csv")).unwrap();
    assert!(density.starts_with("layer,head,metric,value\n"));
    assert_eq!(density.lines().count(), 1 + 2);
    assert!(csv_dir.join("confidencem1.csv").is_file());
    assert!(csv_dir.join("js_divergence.csv").is_file());
}

#[test]
fn train_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# softmax baseline\npi_mode = softmax\nlearning_rate = 0.02\n").unwrap();
    let run = dir.path().join("run");
    let out = small_train(&run, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let snapshot = std::fs::read_to_string(run.join("config.snapshot")).unwrap();
    assert!(snapshot.contains("pi_mode = softmax\n"));
    assert!(snapshot.contains("learning_rate = 0.02\n"));
    let report: MetricReport =
        serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert!(report.densities.iter().flatten().all(|&d| d == 1.0));
}

#[test]
fn train_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = small_train(&run, &["--set", "stepz=4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    let out = small_train(&run, &["--pi-mode", "sparsemax"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = entmax(&[
        "analyze",
        "--tensors",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
