use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lbcnet"));
    cmd.env_remove("LBC_OUT_DIR");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn assert_valid(kind: &str, instance: &Value) {
    let text = std::fs::read_to_string(schema_dir().join(format!("{kind}.schema.json"))).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{kind}: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// simulate -> fit -> estimate -> diagnose in `dir`.
fn pipeline(dir: &Path, extra_fit: &[&str]) {
    let d = s(dir);
    ok(&["simulate", "--scenario", "ks-correct", "--n", "1000", "--seed", "7", "--out-dir", d]);
    let data = dir.join("simulated.csv");
    let scores = dir.join("scores.csv");
    let mut fit = vec!["fit", "--input", s(&data), "--epochs", "150", "--seed", "3", "--out-dir", d];
    fit.extend_from_slice(extra_fit);
    ok(&fit);
    ok(&[
        "estimate", "--input", s(&data), "--scores", s(&scores), "--bootstrap", "4", "--bootstrap-epochs", "20",
        "--out-dir", d,
    ]);
    ok(&["diagnose", "--input", s(&data), "--scores", s(&scores), "--out-dir", d]);
}

#[test]
fn pipeline_outputs_follow_schemas() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[]);
    for (file, kind) in [
        ("truth.json", "truth"),
        ("fit.json", "fit"),
        ("estimate.json", "estimate"),
        ("balance.json", "balance"),
    ] {
        assert_valid(kind, &read_json(&dir.path().join(file)));
    }
    let header = |f: &str| {
        std::fs::read_to_string(dir.path().join(f))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("simulated.csv"), "id,t,y,z1,z2,z3,z4");
    assert_eq!(header("scores.csv"), "id,t,score");
    assert_eq!(header("balance.csv"), "covariate,measure,p0,bandwidth,value");
    assert_eq!(header("calibration.csv"), "lower,upper,count,mean_score,treated_proportion");
    let text = std::fs::read_to_string(dir.path().join("balance.csv")).unwrap();
    assert!(!text.contains('\r'));
    assert_eq!(text.lines().count(), 1 + 4 * 100);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &[]);
    pipeline(b.path(), &[]);
    for dir in [&a, &b] {
        ok(&[
            "benchmark", "--scenario", "ks-mis", "--reps", "2", "--n", "200", "--epochs", "20", "--seed", "5",
            "--out-dir", s(dir.path()),
        ]);
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 10);
    for name in names {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name:?} differs between runs");
    }
}

#[test]
fn lambda_changes_the_scores() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &["--lambda", "0"]);
    pipeline(b.path(), &["--lambda", "1"]);
    let x = std::fs::read(a.path().join("scores.csv")).unwrap();
    let y = std::fs::read(b.path().join("scores.csv")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn benchmark_reports_every_method() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "benchmark", "--scenario", "ks-mis", "--reps", "3", "--n", "300", "--epochs", "30", "--out-dir",
        s(dir.path()),
    ]);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,scenario,n,reps,failures,pct_bias,rmse,variance,mean_gsd,mean_lsd");
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["true-ps", "logistic", "bce", "lbc-net"]);
    assert_valid("metrics", &read_json(&dir.path().join("metrics.json")));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# study settings\nscenario = ssmr-mis\nn = 40\nseed = 9\n").unwrap();
    ok(&["simulate", "--config", s(&cfg), "--n", "25", "--out-dir", s(dir.path())]);
    let truth = read_json(&dir.path().join("truth.json"));
    assert_eq!(truth["n"], 25);
    assert_eq!(truth["seed"], 9);
    assert_eq!(truth["scenario"], "ssmr-mis");

    std::fs::write(&cfg, "scenario = ks-mis\nepoch = 3\n").unwrap();
    let out = run(&["simulate", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_valid("error", &err);
    assert_eq!(err["error"]["code"], "usage");
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("LBC_OUT_DIR", dir.path())
        .args(["simulate", "--scenario", "ks-correct", "--n", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("simulated.csv").is_file());
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = s(dir.path());

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_valid("error", &stderr_json(&out));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,t,y,x\n1,0,1.0,0.5\n2,1,2.0,0.1\n3,0,1.5,0.9\n4,1,2.5,0.3\n5,2,1.0,0.2\n").unwrap();
    let out = run(&["fit", "--input", s(&bad), "--epochs", "5", "--out-dir", d]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["code"], "non_binary_treatment");
    assert!(err["error"]["message"].as_str().unwrap().contains("row 5"));

    let out = run(&["fit", "--input", s(&dir.path().join("missing.csv")), "--out-dir", d]);
    assert_eq!(out.status.code(), Some(4));

    let out = run(&["fit", "--input", s(&bad), "--learning-rate=-1", "--out-dir", d]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["code"], "domain");
}
