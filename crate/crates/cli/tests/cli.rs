//! Drives the built binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    run_env(args, None)
}

fn run_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_noisequant"));
    cmd.args(args).env_remove("GDNSQ_SEED");
    if let Some(s) = seed {
        cmd.env("GDNSQ_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_teacher(dir: &Path, data: &str) -> std::path::PathBuf {
    let out = dir.join("teacher");
    ok(&["train-fp", "--model", "mlp", "--data", data, "--out", p(&out)]);
    out.join("teacher.ckpt")
}

/// Teacher and PTQ checkpoints for a fresh run.
fn warm_start(dir: &Path, data: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let teacher = train_teacher(dir, data);
    let out = dir.join("ptq");
    ok(&["ptq", "--ckpt", p(&teacher), "--out", p(&out)]);
    (teacher, out.join("ptq.ckpt"))
}

#[test]
fn verify_passes_and_rejects_unknown_filters() {
    let out = ok(&["verify"]);
    assert!(out.lines().count() >= 10);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    let filtered = ok(&["verify", "--filter", "bsc_reduction"]);
    assert!(filtered.lines().all(|l| l.contains("bsc")));
    assert_eq!(run(&["verify", "--filter", "no_such_oracle"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["qat", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["train-fp", "--model", "resnet999"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let (teacher, ptq) = warm_start(dir.path(), "two_gaussians");
    let q = dir.path().join("q");
    let missing = run(&["qat", "--teacher", p(&teacher), "--out", p(&q)]);
    assert_eq!(missing.status.code(), Some(2));
    let bad = run(&["qat", "--ckpt", p(&ptq), "--teacher", p(&teacher), "--wbits", "0", "--out", p(&q)]);
    assert_eq!(bad.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad.stderr));
}

#[test]
fn ptq_audit_reports_ten_bits() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = train_teacher(dir.path(), "concentric_rings");
    let ptq_dir = dir.path().join("ptq");
    ok(&["ptq", "--ckpt", p(&teacher), "--out", p(&ptq_dir)]);
    let report: Value = serde_json::from_str(&ok(&["audit", "--ckpt", p(&ptq_dir.join("ptq.ckpt")), "--json"])).unwrap();
    let sites = report["sites"].as_array().unwrap();
    assert!(!sites.is_empty());
    assert!(sites.iter().all(|s| s["actual"] == 10), "{report}");
    let text = ok(&["audit", "--ckpt", p(&ptq_dir.join("ptq.ckpt"))]);
    assert!(text.contains("actual=10"));
}

#[test]
fn qat_writes_artifacts_that_export_and_fuse() {
    let dir = tempfile::tempdir().unwrap();
    let (teacher, ptq) = warm_start(dir.path(), "two_gaussians");
    let run_dir = dir.path().join("qat");
    ok(&["qat", "--ckpt", p(&ptq), "--teacher", p(&teacher), "--wbits", "4", "--abits", "4", "--epochs", "3", "--out", p(&run_dir)]);
    for f in ["run.json", "metrics.csv", "last.ckpt", "summary.json"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let config: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(config["weight_bits"], 4.0);
    assert_eq!(config["epochs"], 3);

    let rows: Value = serde_json::from_str(&ok(&["export-metrics", "--run-dir", p(&run_dir), "--format", "json"])).unwrap();
    let audits = rows.as_array().unwrap().iter().filter(|r| !r["val_acc"].is_null()).count();
    assert_eq!(audits, 3);
    let csv = ok(&["export-metrics", "--run-dir", p(&run_dir)]);
    assert!(csv.starts_with("step,"));
    assert_eq!(csv.lines().count(), rows.as_array().unwrap().len() + 1);

    let fused = dir.path().join("fused.json");
    ok(&["fuse", "--ckpt", p(&run_dir.join("last.ckpt")), "--out", p(&fused)]);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&fused).unwrap()).unwrap();
    assert_eq!(doc["inner"].as_array().unwrap().len(), 1);
}

#[test]
fn qat_resume_continues_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (teacher, ptq) = warm_start(dir.path(), "two_gaussians");
    let run_dir = dir.path().join("qat");
    let base = ["qat", "--teacher", p(&teacher), "--out", p(&run_dir)];
    ok(&[&base[..], &["--ckpt", p(&ptq), "--epochs", "2"]].concat());
    let metrics = std::fs::read(run_dir.join("metrics.csv")).unwrap();

    let clash = run(&[&base[..], &["--resume", "--ckpt", p(&ptq)]].concat());
    assert_eq!(clash.status.code(), Some(2));

    // A finished run resumes to completion without extra work.
    ok(&[&base[..], &["--resume"]].concat());
    assert_eq!(std::fs::read(run_dir.join("metrics.csv")).unwrap(), metrics);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 2);
}

#[test]
fn seed_env_var_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let train = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run_env(&["train-fp", "--data", "concentric_rings", "--epochs", "2", "--out", p(&out)], Some(seed));
        assert!(o.status.success());
        std::fs::read(out.join("teacher.ckpt")).unwrap()
    };
    let (a, b, c) = (train("a", "7"), train("b", "7"), train("c", "8"));
    assert_eq!(a, b);
    assert_ne!(a, c);

    let flag = dir.path().join("flag");
    ok(&["train-fp", "--data", "concentric_rings", "--epochs", "2", "--seed", "7", "--out", p(&flag)]);
    assert_eq!(std::fs::read(flag.join("teacher.ckpt")).unwrap(), a);
}
