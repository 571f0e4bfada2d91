use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn run_env(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lpforge"));
    cmd.args(args).env_remove("LPFORGE_THREADS");
    if let Some(t) = threads {
        cmd.env("LPFORGE_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn json(args: &[&str]) -> Value {
    let mut full = args.to_vec();
    full.extend(["--format", "json"]);
    let out = run_env(&full, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("one JSON document")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lpforge-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

/// Key structure and value types, without the values.
fn schema(v: &Value) -> Value {
    match v {
        Value::Null => "null".into(),
        Value::Bool(_) => "bool".into(),
        Value::Number(n) if n.is_f64() => "float".into(),
        Value::Number(_) => "int".into(),
        Value::String(_) => "string".into(),
        Value::Array(items) => Value::Array(items.first().map(schema).into_iter().collect()),
        Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), schema(v))).collect()),
    }
}

fn check_golden(name: &str, v: &Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    let got = serde_json::to_string_pretty(&schema(v)).unwrap() + "\n";
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &got).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(got, want, "schema of `{name}` changed");
}

#[test]
fn golden_schemas() {
    let w = tmp("golden.net");
    let w = w.to_str().unwrap();
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("quantize", vec!["quantize", "--values=-0.8,0.1,0.6", "--bits", "2"]),
        ("quantize_passthrough", vec!["quantize", "--values=0.25", "--bits", "32"]),
        ("gemm", vec!["gemm", "--backend", "ref"]),
        ("sim", vec!["sim", "--m", "8", "--n", "8", "--k", "16"]),
        ("analyze", vec!["analyze", "--topology", "r44", "--mode", "training"]),
        ("widen", vec!["widen", "--topology", "r44", "--fraction", "0.3", "--output", w]),
        ("cost", vec!["cost", "--topology", "r56", "--wbits", "2", "--abits", "8", "--baseline", "r56"]),
        ("train", vec!["train", "--scheme", "apprentice", "--epochs", "2", "--classes", "3"]),
        ("bench", vec!["bench", "--m", "8", "--n", "8", "--k", "32", "--reps", "1"]),
    ];
    for (name, args) in cases {
        check_golden(name, &json(&args));
    }
}

#[test]
fn training_footprint_activations_exceed_weights() {
    let r = json(&["analyze", "--topology", "resnet50.net", "--batch", "32", "--mode", "training", "--wbits", "32", "--abits", "32"]);
    assert!(r["activation_bytes"].as_u64().unwrap() > r["weight_bytes"].as_u64().unwrap());
}

#[test]
fn sim_checksum_matches_reference_gemm() {
    let sim = json(&["sim", "--m", "8", "--n", "8", "--k", "16", "--seed", "1"]);
    assert_eq!(sim["cycles"], 38);
    for backend in ["ref", "ternary", "int"] {
        let g = json(&["gemm", "--m", "8", "--n", "8", "--k", "16", "--seed", "1", "--backend", backend]);
        assert_eq!(g["checksum"], sim["checksum"], "{backend}");
    }
    let other = json(&["gemm", "--m", "8", "--n", "8", "--k", "16", "--seed", "2"]);
    assert_ne!(other["checksum"], sim["checksum"]);
}

#[test]
fn widened_low_precision_costs_less_than_fp32_baseline() {
    let w = tmp("r44w.net");
    let w = w.to_str().unwrap();
    let widened = json(&["widen", "--topology", "r44.net", "--factor", "2", "--fraction", "0.3", "--output", w]);
    assert_eq!(widened["widened_layers"].as_array().unwrap().len(), 13);
    let c = json(&["cost", "--topology", w, "--wbits", "2", "--abits", "8", "--baseline", "r44.net"]);
    let ratio = c["ratio"].as_f64().unwrap();
    assert!(ratio < 1.0, "{ratio}");
    assert_eq!(c["baseline"]["weight_bits"], 32);

    let text = std::fs::read_to_string(w).unwrap();
    assert!(text.starts_with("# r44-w2x0.3"));
    let table = run_env(&["cost", "--topology", w, "--wbits", "2", "--abits", "8", "--baseline", "r44"], None);
    assert!(String::from_utf8(table.stdout).unwrap().contains("ratio"));
}

#[test]
fn train_writes_history_and_checkpoint() {
    let hist = tmp("h.jsonl");
    let ckpt = tmp("net.ckpt");
    let r = json(&[
        "train", "--scheme", "low_precision", "--epochs", "3", "--classes", "3",
        "--history", hist.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    let lines: Vec<Value> = std::fs::read_to_string(&hist)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines, r["history"].as_array().unwrap().clone());
    let net = lpforge::toytrain::load_checkpoint(&ckpt).unwrap();
    assert_eq!(net.quant().weight_bits(), 2);

    let bad = run_env(&["train", "--scheme", "apprentice", "--epochs", "1", "--classes", "3", "--teacher", ckpt.to_str().unwrap()], None);
    assert_eq!(bad.status.code(), Some(2), "a 2-bit teacher is rejected");

    let teacher = tmp("teacher.ckpt");
    json(&["train", "--scheme", "baseline", "--epochs", "2", "--classes", "3", "--checkpoint", teacher.to_str().unwrap()]);
    let student = json(&["train", "--scheme", "apprentice", "--epochs", "2", "--classes", "3", "--teacher", teacher.to_str().unwrap()]);
    assert!(student["teacher_accuracy"].is_null());
    assert_eq!(student["history"].as_array().unwrap().len(), 2);
}

#[test]
fn thread_count_does_not_change_results() {
    for args in [
        vec!["train", "--scheme", "wrpn", "--epochs", "2", "--format", "json"],
        vec!["gemm", "--m", "33", "--n", "20", "--k", "70", "--format", "json"],
    ] {
        let one = run_env(&args, Some("1"));
        let four = run_env(&args, Some("4"));
        assert!(one.status.success() && four.status.success());
        assert_eq!(one.stdout, four.stdout);
    }
}

#[test]
fn exit_codes() {
    let code = |args: &[&str], threads: Option<&str>| run_env(args, threads).status.code();
    assert_eq!(code(&["frobnicate"], None), Some(1));
    assert_eq!(code(&["sim", "--bogus"], None), Some(1));
    assert_eq!(code(&["gemm", "--m", "0"], None), Some(1));
    assert_eq!(code(&["sim"], Some("zero")), Some(1));
    assert_eq!(code(&["analyze", "--topology", "no-such-net"], None), Some(2));
    assert_eq!(code(&["quantize", "--values", "0.5", "--bits", "1"], None), Some(2));
    assert_eq!(code(&["sim", "--rows", "0"], None), Some(2));
    assert_eq!(code(&["train", "--scheme", "nope"], None), Some(2));
    assert_eq!(code(&["--help"], None), Some(0));

    let bad = tmp("bad.net");
    std::fs::write(&bad, "input 8 8 1\nconv name=a out=4 k=9\n").unwrap();
    let out = run_env(&["analyze", "--topology", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(out.stdout.is_empty());
}

#[test]
fn table_is_default_format() {
    let out = run_env(&["sim"], None);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("cycles") && l.trim_end().ends_with("38")));
    assert!(serde_json::from_str::<Value>(&text).is_err());
}
