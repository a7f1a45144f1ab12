use std::path::Path;
use std::process::{Command, Output};

use pointreg::harness::{load_pointset, GroundTruth};
use pointreg::report::Metrics;
use pointreg::RegistrationReport;

fn pointreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointreg")).current_dir(dir).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_register_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pointreg(d, &["synth", "--kind", "rigid", "--noise", "0.01", "--outliers", "20", "--seed", "3", "--out-prefix", "p"]));
    for f in ["p_x.txt", "p_y.txt", "p_truth.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let x = load_pointset(d.join("p_x.txt")).unwrap();
    let y = load_pointset(d.join("p_y.txt")).unwrap();
    assert_eq!(x.count(), y.count() + 20);
    let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(d.join("p_truth.json")).unwrap()).unwrap();

    ok(&pointreg(d, &["register", "--method", "rigid", "--w", "0.2", "--out", "r.json", "--aligned", "a.txt", "p_x.txt", "p_y.txt"]));
    let report = RegistrationReport::from_json(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(report.converged);
    assert_eq!(report.config.w, 0.2);
    assert_eq!(load_pointset(d.join("a.txt")).unwrap(), report.aligned);

    let out = pointreg(d, &["eval", "--report", "r.json", "--truth", "p_truth.json"]);
    ok(&out);
    let metrics: Metrics = serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics.rotation_error.unwrap() < 0.02, "{metrics:?}");
    assert_eq!(metrics, pointreg::harness::evaluate(&report, &truth).unwrap());
}

#[test]
fn nonrigid_with_missing_region() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pointreg(d, &["synth", "--kind", "nonrigid", "--deform", "0.02", "--missing", "x:1:0.8:1", "--out-prefix", "n"]));
    let x = load_pointset(d.join("n_x.txt")).unwrap();
    let y = load_pointset(d.join("n_y.txt")).unwrap();
    assert!(x.count() < y.count());
    let out = pointreg(d, &["register", "--method", "nonrigid", "--w", "0.3", "--fast", "auto", "n_x.txt", "n_y.txt"]);
    ok(&out);
    let report = RegistrationReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(report.aligned.count(), y.count());
}

#[test]
fn bench_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let grid = r#"{"shape": "fish", "kind": "rigid", "axis": "noise", "values": [0.0, 0.02]}"#;
    std::fs::write(d.join("grid.json"), grid).unwrap();
    let out = pointreg(d, &["bench", "--grid", "grid.json", "--methods", "rigid,icp", "--trials", "2", "--out", "bench"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("icp"));
    assert!(std::fs::read_dir(d.join("bench")).unwrap().count() > 0);
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(pointreg(d, &["register", "--method", "spline", "a.txt", "b.txt"]).status.code(), Some(2));
    assert_eq!(pointreg(d, &["frobnicate"]).status.code(), Some(2));
    std::fs::write(d.join("x.txt"), "0 0\n1 1\n").unwrap();
    std::fs::write(d.join("bad.txt"), "0 0\n1\n").unwrap();
    let out = pointreg(d, &["register", "x.txt", "bad.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(pointreg(d, &["register", "--w", "1.5", "x.txt", "x.txt"]).status.code(), Some(2));
    assert_eq!(pointreg(d, &["register", "x.txt", "missing.txt"]).status.code(), Some(1));
}
