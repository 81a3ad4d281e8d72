use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use normsphere::geometry::center;
use normsphere::verify::Probes;
use normsphere::{DenseTensor, Result};

fn normsphere(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normsphere")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out-dir", out.to_str().unwrap(), "--max-steps", "60"];
    args.extend_from_slice(extra);
    normsphere(&args)
}

#[test]
fn verify_single_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = normsphere(&["verify", "--suite", "lemma1", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("PASS"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(json[0]["suite"], "lemma1");
    assert!(json[0]["checks"][0]["value"].as_f64().unwrap() < 1e-9);
}

fn flipped_center(v: &DenseTensor) -> Result<DenseTensor> {
    Ok(center(v)?.scale(-1.0))
}

#[test]
fn sign_bug_in_center_fails_verify() {
    let dir = tempfile::tempdir().unwrap();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let args = ["normsphere", "verify", "--suite", "lemma1", "--out-dir", dir.path().to_str().unwrap()];
    let status = normsphere_cli::run(args, &Probes { center: flipped_center }, &mut out, &mut err);
    assert_eq!(status, 1);
    let out = text(&out);
    assert!(out.contains("FAILED: lemma1: reconstruction"), "{out}");
}

#[test]
fn unknown_suite_is_usage_error() {
    let o = normsphere(&["verify", "--suite", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("weight-norms"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&normsphere(&["train", "--learning-rate", "0.1"])), 2);
}

#[test]
fn all_suites_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = normsphere(&["verify", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(code(&o), 0, "{}", text(&o.stdout));
    assert!(text(&o.stdout).contains("all 9 suites passed"));
}

#[test]
fn train_writes_metrics_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = train(d.path(), &["--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    }
    let csv = |d: &Path| std::fs::read(d.join("bn_wd0_seed7/metrics.csv")).unwrap();
    let rows = String::from_utf8(csv(a.path())).unwrap().lines().count();
    assert!(rows > 1);
    assert_eq!(csv(a.path()), csv(b.path()));
}

#[test]
fn paired_weight_decay_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), &["--method", "bn", "--wd", "0"])), 0);
    assert_eq!(code(&train(dir.path(), &["--method", "bn", "--wd", "5e-4"])), 0);
    assert!(dir.path().join("bn_wd0_seed0/summary.json").is_file());
    assert!(dir.path().join("bn_wd0.0005_seed0/summary.json").is_file());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"method": "ln", "lr": 0.05, "hidden": [8], "seed": 4}"#).unwrap();
    let o = train(dir.path(), &["--config", cfg.to_str().unwrap(), "--method", "wn"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("wn_wd0_seed4/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["learning_rate"], 0.05);
    assert_eq!(summary["config"]["hidden"], serde_json::json!([8]));

    std::fs::write(&cfg, r#"{"learning_rate": 0.05}"#).unwrap();
    assert_eq!(code(&train(dir.path(), &["--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn instance_norm_in_mlp_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), &["--method", "in"])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--method", "none", "--lr", "1e6"]);
    assert_eq!(code(&o), 3);
    assert!(text(&o.stdout).contains("diverged"));
}

#[test]
fn attack_after_train() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), &["--lr", "0.01"])), 0);
    let run = dir.path().join("bn_wd0_seed0");
    let o = normsphere(&["attack", run.to_str().unwrap(), "--noise-draws", "5", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let o = normsphere(&["attack", run.to_str().unwrap(), "--eps", "0", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));

    let rows = normsphere::robustness::read_report_csv(&run.join("robustness.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].accdiff2 > 0.0);
    assert_eq!(rows[1].accdiff2, 0.0);
    assert_eq!(rows[1].clean, rows[1].bim);
}

#[test]
fn attack_on_missing_run_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = normsphere(&["attack", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&train(dir.path(), &[])), 0);
    let run = dir.path().join("bn_wd0_seed0");
    std::fs::remove_file(run.join("model.bin")).unwrap();
    assert_eq!(code(&normsphere(&["attack", run.to_str().unwrap()])), 2);
}

#[test]
fn report_has_one_row_per_pair_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    for method in ["bn", "gn", "ln", "wn"] {
        for wd in ["0", "5e-4"] {
            assert_eq!(code(&train(&runs, &["--method", method, "--wd", wd])), 0);
        }
    }
    let pattern = format!("{}/*", runs.display());
    let out = dir.path().join("out");
    let o = normsphere(&["report", &pattern, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let first = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(first.lines().count(), 1 + 8);
    assert!(text(&o.stdout).contains("GN+WD(0.0005)"));

    normsphere(&["report", &pattern, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap(), first);
}

#[test]
fn empty_report_glob_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = format!("{}/nothing*", dir.path().display());
    assert_eq!(code(&normsphere(&["report", &pattern])), 2);
}
