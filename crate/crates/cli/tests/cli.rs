use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn proteus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proteus"))
        .args(args)
        .env("PROTEUS_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset, tiny network and a short run so the pipeline finishes fast.
fn pipeline(dir: &Path) -> (String, String) {
    let data = dir.join("ds");
    let ckpt = dir.join("ckpt");
    let o = proteus(&["gen-synth", "--out", p(&data), "--models", "4", "--queries", "600", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(data.join("pool.json").exists() && data.join("records.jsonl").exists());
    assert_eq!(fs::read_to_string(data.join("records.jsonl")).unwrap().lines().count(), 600);

    let cfg = dir.join("train.json");
    fs::write(
        &cfg,
        r#"{"hidden": 8, "total_steps": 40, "session_length": 10, "batch_size": 8,
            "featurizer": {"mode": "hashed", "dim": 32, "seed": 0}, "validation_queries": 16}"#,
    )
    .unwrap();
    let o = proteus(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["manifest.json", "weights.bin", "config.json", "pool.json", "split.json", "trace.jsonl"] {
        assert!(ckpt.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(ckpt.join("trace.jsonl")).unwrap().lines().count(), 40);
    (data.to_str().unwrap().into(), ckpt.to_str().unwrap().into())
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = pipeline(dir.path());

    let o = proteus(&["eval", "--ckpt", &ckpt, "--data", &data, "--grid", "0.80:0.95:0.01"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 16);
    for key in ["floor_compliance", "band_compliance_2pct", "band_compliance_5pct", "tau_mu_pearson", "rpi"] {
        let v = report[key].as_f64().unwrap();
        assert!(v.is_finite(), "{key}");
    }
    assert_eq!(report["tiers"].as_array().unwrap().len(), 3);
    assert!(stderr(&o).contains("floor compliance"));

    let out = dir.path().join("report.json");
    let csv = dir.path().join("rows.csv");
    let o = proteus(&[
        "eval", "--ckpt", &ckpt, "--data", &data, "--out", p(&out), "--csv", p(&csv), "--router-ms", "2",
        "--llm-ms", "500",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let saved: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(saved["re"].as_f64().is_some());
    assert_eq!(saved["rows"], report["rows"]);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 17);

    let o = proteus(&["route", "--ckpt", &ckpt, "--tau", "0.90", "--text", "2+2?"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(d["model_index"].as_u64().unwrap() < 4);
    assert_eq!(d["tau"], 0.9);
    let again = proteus(&["route", "--ckpt", &ckpt, "--tau", "0.90", "--text", "2+2?"]);
    assert_eq!(o.stdout, again.stdout);

    let sim = dir.path().join("sim");
    let o = proteus(&[
        "simulate", "--ckpt", &ckpt, "--data", &data, "--scenario", "step", "--seeds", "2", "--length", "200",
        "--out", p(&sim),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(sim.join("step_seed0.jsonl")).unwrap().lines().count(), 200);
    assert!(sim.join("summary.json").exists());
}

#[test]
fn exit_codes() {
    let o = proteus(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("gen-synth"));
    assert_eq!(code(&proteus(&["train", "--bogus"])), 1);
    assert_eq!(code(&proteus(&["fly"])), 1);
    assert_eq!(code(&proteus(&[])), 1);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = proteus(&["route", "--ckpt", p(&missing), "--tau", "0.9", "--text", "x"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"batch_size": 0}"#).unwrap();
    let o = proteus(&["train", "--config", p(&bad), "--data", p(dir.path()), "--out", p(&missing)]);
    assert_eq!(code(&o), 2, "missing data files are a runtime failure: {}", stderr(&o));

    let data = dir.path().join("ds");
    assert_eq!(code(&proteus(&["gen-synth", "--out", p(&data), "--models", "3", "--queries", "50"])), 0);
    let o = proteus(&["train", "--config", p(&bad), "--data", p(&data), "--out", p(&missing)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    fs::write(&bad, r#"{"batch_sise": 4}"#).unwrap();
    let o = proteus(&["train", "--config", p(&bad), "--data", p(&data), "--out", p(&missing)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&proteus(&["gen-synth", "--out", p(&data), "--models", "1"])), 1);
}

#[test]
fn invalid_eval_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = pipeline(dir.path());
    let o = proteus(&["eval", "--ckpt", &ckpt, "--data", &data, "--grid", "0.9:0.8:0.01"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = proteus(&["eval", "--ckpt", &ckpt, "--data", &data, "--router-ms", "2"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = proteus(&["simulate", "--ckpt", &ckpt, "--data", &data, "--scenario", "spiky"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = proteus(&["route", "--ckpt", &ckpt, "--tau", "0.9"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
