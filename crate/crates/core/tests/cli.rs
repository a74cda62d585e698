//! End-to-end runs of the `qglue` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qglue::gauges::CylField;
use serde_json::Value;

fn qglue(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qglue")).args(args).output().expect("binary runs")
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn assert_schema(command: &str, s: &Value) {
    let path = repo(&format!("schemas/{command}.summary.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    for key in schema["required"].as_array().unwrap() {
        let key = key.as_str().unwrap();
        assert!(s.get(key).is_some(), "{command} summary lacks {key}");
    }
    assert_eq!(s["command"], command);
}

#[test]
fn orbit_writes_record_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = qglue(&["orbit", "--n", "5", "--eps", "0.5", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(dir.path());
    assert_schema("orbit", &s);
    assert!(s["residualSup"].as_f64().unwrap() < 1e-8);
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout, s);
    let record: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("orbit.json")).unwrap()).unwrap();
    assert_eq!(record["nSamples"], 65);
}

#[test]
fn indicial_at_the_top_of_the_family_has_unit_exponents() {
    let dir = tempfile::tempdir().unwrap();
    let out = qglue(&["indicial", "--n", "5", "--eps", "0.8358", "--modes", "0..2", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(dir.path());
    assert_schema("indicial", &s);
    let modes = s["modes"].as_array().unwrap();
    assert_eq!(modes.len(), 3);
    let one: Vec<f64> = modes[1]["exponents"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((one[1] - 1.0).abs() < 1e-6 && (one[2] + 1.0).abs() < 1e-6, "{one:?}");
}

#[test]
fn correct_from_config_emits_field_trace_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo("configs/reference_glue.json");
    let out = qglue(&["correct", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_schema("correct", &summary(dir.path()));
    let field = CylField::from_json(&std::fs::read_to_string(dir.path().join("field.json")).unwrap()).unwrap();
    assert!(field.validate().is_ok());
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("k,defectSup,corrSup,ratio"));
    let last = lines.last().unwrap();
    let final_defect: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!(final_defect < 1e-9);
    let diag: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("diagnostics.json")).unwrap()).unwrap();
    assert!(diag["sigmaMin"].as_f64().unwrap() > 0.0);
    assert_eq!(diag["condEstimates"].as_array().unwrap().len(), 2);
}

#[test]
fn manifests_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo("configs/reference_glue.json");
    let manifest = dir.path().join("run.json");
    let body = serde_json::json!({
        "command": "diagnose",
        "params": { "config": cfg, "gridPerPeriod": 32 },
        "outputs": { "dir": "a", "files": { "diagnostics": "a/extra/diag.json" } },
        "seed": 5,
    });
    std::fs::write(&manifest, body.to_string()).unwrap();
    let first = qglue(&["run", "--manifest", manifest.to_str().unwrap()]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let a = std::fs::read(dir.path().join("a/summary.json")).unwrap();
    let d = std::fs::read(dir.path().join("a/extra/diag.json")).unwrap();
    assert_schema("diagnose", &serde_json::from_slice(&a).unwrap());
    qglue(&["run", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(a, std::fs::read(dir.path().join("a/summary.json")).unwrap());
    assert_eq!(d, std::fs::read(dir.path().join("a/extra/diag.json")).unwrap());
}

#[test]
fn schema_violations_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bad.json");
    std::fs::write(&manifest, r#"{"command":"orbit","params":{"eps":0.5,"grid":64},"outputs":{"dir":"o"}}"#).unwrap();
    let out = qglue(&["run", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("params") && err.contains("grid"), "{err}");

    std::fs::write(&manifest, r#"{"command":"launch","outputs":{"dir":"o"}}"#).unwrap();
    assert_eq!(qglue(&["run", "--manifest", manifest.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(qglue(&["orbit", "--out", dir.path().to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn domain_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = qglue(&["orbit", "--eps", "0.95", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("error.json")).unwrap()).unwrap();
    assert_eq!(err["exitCode"], 2);
    let cfg = repo("configs/reference_glue.json");
    let out = qglue(&["correct", "--config", cfg.to_str().unwrap(), "--delta", "0.9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
