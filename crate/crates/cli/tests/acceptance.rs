//! Criterion 10: the synth -> train -> evaluate pipeline finishes inside a
//! minute, emits schema-valid JSON, and is byte-reproducible run to run.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glycast"))
}

fn run_ok(args: &[&str]) {
    let output = bin().args(args).output().expect("spawn glycast");
    assert!(
        output.status.success(),
        "glycast {:?} failed: {}",
        args,
        String::from_utf8_lossy(&output.stderr)
    );
}

fn pipeline(root: &Path) {
    let data = root.join("data");
    let models = root.join("models");
    let eval = root.join("eval");
    let d = data.to_str().unwrap();
    run_ok(&[
        "synth",
        "--out-dir", d,
        "--seed", "11",
        "--users", "2",
        "--points", "220",
        "--latent-freq", "0.01",
        "--noise-sd", "20",
    ]);
    let glucose = data.join("glucose.csv");
    let side = data.join("side.csv");
    run_ok(&[
        "train",
        "--glucose-csv", glucose.to_str().unwrap(),
        "--side-csv", side.to_str().unwrap(),
        "--out-dir", models.to_str().unwrap(),
        "--latent-dim", "4",
        "--max-iters", "40",
        "--max-train-windows", "80",
        "--seed", "11",
    ]);
    run_ok(&[
        "evaluate",
        "--glucose-csv", glucose.to_str().unwrap(),
        "--side-csv", side.to_str().unwrap(),
        "--out-dir", eval.to_str().unwrap(),
        "--models", "gp,gp_context",
        "--latent-dim", "4",
        "--max-iters", "40",
        "--max-train-windows", "80",
        "--seed", "11",
    ]);
}

#[test]
fn criterion_10_end_to_end_pipeline() {
    let started = Instant::now();
    let dir_a = tempfile::tempdir().unwrap();
    pipeline(dir_a.path());
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed <= 60.0, "pipeline took {elapsed:.1}s");

    // schema-valid JSON: required keys with the right types
    let report_text = std::fs::read_to_string(dir_a.path().join("eval/report.json")).unwrap();
    let reports: serde_json::Value = serde_json::from_str(&report_text).unwrap();
    let list = reports.as_array().expect("report.json is a list");
    assert_eq!(list.len(), 2);
    for entry in list {
        assert_eq!(entry["report_version"], 1);
        assert!(entry["model_name"].is_string());
        assert_eq!(entry["status"], "ok");
        assert!(entry["config_digest"].is_string());
        let metrics = &entry["metrics"];
        for class in ["hypo", "eu", "hyper"] {
            assert!(metrics[class]["precision"].is_number());
            assert!(metrics[class]["recall"].is_number());
            assert!(metrics[class]["support"].is_number());
        }
        assert!(metrics["overall_precision"].is_number());
        assert!(metrics["overall_recall"].is_number());
        assert!(entry["rmse"].is_number());
    }

    // byte-reproducible: a second identical run produces identical files
    let dir_b = tempfile::tempdir().unwrap();
    pipeline(dir_b.path());
    for rel in [
        "data/glucose.csv",
        "data/side.csv",
        "models/model.synth000.json",
        "models/model.synth001.json",
        "eval/report.json",
        "eval/MANIFEST.json",
    ] {
        let a = std::fs::read(dir_a.path().join(rel)).unwrap();
        let b = std::fs::read(dir_b.path().join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
    println!("[PASS] criterion 10: synth -> train -> evaluate in {elapsed:.1}s, schema-valid and byte-reproducible");
}
