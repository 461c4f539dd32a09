//! End-to-end tests of the command-line contract: exit codes, artifacts,
//! and the scoring fixture.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icnn-metric"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

const FIXTURE_CSV: &str = "id,label,f0\na1,a,0.0\na2,a,0.1\nb1,b,1.0\nb2,b,1.1\n";

/// Fast synthetic profile shared by the train/ablate tests.
fn tiny_args<'a>(out_dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "--out",
        out_dir,
        "--dataset.n_classes",
        "8",
        "--dataset.per_class",
        "10",
        "--dataset.dim",
        "6",
        "--dataset.center_sep",
        "4.0",
        "--dataset.train_classes",
        "4",
        "--dataset.val_classes",
        "0",
        "--dataset.test_classes",
        "4",
        "--episode.ways",
        "3",
        "--episode.shots",
        "2",
        "--episode.queries_per_class",
        "4",
        "--train.epochs",
        "2",
        "--train.tasks_per_epoch",
        "3",
        "--train.val_tasks",
        "3",
        "--train.eval_tasks",
        "8",
        "--train.encoder_dims",
        "8",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn missing_config_file_exits_2_and_names_path() {
    let out = run(&["train", "--config", "/nonexistent/conf.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/conf.toml"), "{}", stderr(&out));
}

#[test]
fn unknown_command_exits_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let out = run(&["train", "--train.bogus_knob", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus_knob"), "{}", stderr(&out));
}

#[test]
fn help_exits_0() {
    let out = run(&["help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("usage"));
}

#[test]
fn train_writes_the_four_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out_str = out_dir.to_str().unwrap();
    let mut args = vec!["train"];
    args.extend(tiny_args(out_str, &[]));
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    for f in ["manifest.json", "metrics.jsonl", "checkpoint.txt", "embeddings.csv"] {
        assert!(out_dir.join(f).exists(), "missing artifact {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["dataset"]["digest"].as_str().unwrap().starts_with("sha256:"));
    assert_eq!(manifest["config"]["train"]["epochs"], 2);
    // checkpoint magic
    let ckpt = std::fs::read_to_string(out_dir.join("checkpoint.txt")).unwrap();
    assert!(ckpt.starts_with("ICNNMETRIC1"));
}

#[test]
fn same_seed_reproduces_metrics_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let mut args = vec!["train"];
        let out_str = out_dir.to_str().unwrap();
        let extra = ["--seed", "7"];
        args.extend(tiny_args(out_str, &extra));
        let out = run(&args);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    let ma = std::fs::read(a.join("metrics.jsonl")).unwrap();
    let mb = std::fs::read(b.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb, "metrics.jsonl must be byte-identical for the same seed");
}

#[test]
fn score_fixture_prints_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("four.csv");
    std::fs::write(&csv, FIXTURE_CSV).unwrap();
    let out = run(&["score", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let score = v["score"].as_f64().unwrap();
    assert!((score - 2.0).abs() <= 1e-12, "score = {score:.17}");
    let loss = v["loss"].as_f64().unwrap();
    assert!((loss + 2.0f64.ln()).abs() <= 1e-12, "loss = {loss:.17}");
    assert_eq!(v["points"].as_array().unwrap().len(), 4);
    for p in v["points"].as_array().unwrap() {
        assert!((p["lambda"].as_f64().unwrap() - 2.0).abs() <= 1e-12);
        assert_eq!(p["gamma"].as_f64().unwrap(), 0.5);
    }
}

#[test]
fn score_is_scale_invariant_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("four.csv");
    std::fs::write(&csv, FIXTURE_CSV).unwrap();
    let scaled = dir.path().join("four_x10.csv");
    std::fs::write(&scaled, "id,label,f0\na1,a,0.0\na2,a,1.0\nb1,b,10.0\nb2,b,11.0\n").unwrap();

    let a = run(&["score", csv.to_str().unwrap()]);
    let b = run(&["score", scaled.to_str().unwrap()]);
    let va: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    let vb: serde_json::Value = serde_json::from_str(&stdout(&b)).unwrap();
    for (pa, pb) in va["points"]
        .as_array()
        .unwrap()
        .iter()
        .zip(vb["points"].as_array().unwrap())
    {
        assert_eq!(pa["lambda"], pb["lambda"]);
        assert_eq!(pa["gamma"], pb["gamma"]);
        assert_eq!(pa["omega"], pb["omega"]);
    }
}

#[test]
fn score_single_class_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("one_class.csv");
    std::fs::write(&csv, "id,label,f0\na1,a,0.0\na2,a,0.1\n").unwrap();
    let out = run(&["score", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}

#[test]
fn score_missing_file_exits_3() {
    let out = run(&["score", "/nonexistent/data.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn check_filter_prop1_passes() {
    let out = run(&["check", "--filter", "prop1"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("prop1"), "{text}");
    assert!(text.contains("PASS"), "{text}");
    assert!(!text.contains("grad_cross_entropy"), "filter leaked: {text}");
}

#[test]
fn check_injected_fault_exits_1_and_names_the_op() {
    let out = run(&[
        "check",
        "--filter",
        "grad_injected",
        "--inject-fault",
        "square",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("square"), "{text}");
    assert!(text.contains("FAIL"), "{text}");
}

#[test]
fn check_unmatched_filter_exits_2() {
    let out = run(&["check", "--filter", "no_such_check"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_writes_twelve_row_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("grid");
    let out_str = out_dir.to_str().unwrap();
    let mut args = vec!["ablate"];
    let extra = ["--train.eval_tasks", "5"];
    args.extend(tiny_args(out_str, &extra));
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.trim().lines().collect();
    assert_eq!(lines.len(), 13, "header + 12 rows: {csv}");
    assert_eq!(
        lines[0],
        "setting,description,ways,shots,mean_accuracy,ci95,error"
    );
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert!(cols[4].parse::<f64>().is_ok(), "mean column: {line}");
        assert!(cols[5].parse::<f64>().is_ok(), "ci column: {line}");
    }
    assert!(Path::new(&out_dir.join("manifest.json")).exists());
}
