use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn clickfeed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clickfeed")).args(args).env_remove("RUST_LOG").output().expect("spawn clickfeed")
}

fn ok(args: &[&str]) -> String {
    let out = clickfeed(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_bundle(dir: &Path) -> String {
    let path = dir.join("bundle");
    let p = path.to_str().unwrap().to_string();
    ok(&["gen-synthetic", "--out", &p, "--n-items", "300", "--n-train", "40", "--n-test", "30"]);
    p
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_synthetic_then_ingest_check() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path());
    let gen_sum = ok(&["ingest-check", "--dataset", &bundle]);
    assert!(gen_sum.starts_with("ok: 300 items, dim 64"), "{gen_sum}");

    let raw = ok(&[
        "ingest-check",
        "--embeddings",
        &format!("{bundle}/retrieval.cfr"),
        "--metadata",
        &format!("{bundle}/items.jsonl"),
    ]);
    assert_eq!(raw.trim(), "ok: 300 items, dim 64");

    let again = dir.path().join("again");
    let out = ok(&["gen-synthetic", "--out", again.to_str().unwrap(), "--n-items", "300", "--n-train", "40", "--n-test", "30"]);
    assert!(out.contains(gen_sum.lines().nth(1).unwrap()), "same seed must give the same checksum");
}

#[test]
fn zero_lambdas_leave_the_baseline_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path());
    let report = dir.path().join("report.json");
    ok(&["benchmark", "--dataset", &bundle, "--lambda-p", "0", "--lambda-n", "0", "--out", report.to_str().unwrap()]);
    let r = read_json(&report);
    assert_eq!(r["baseline"], r["feedback"]);
    assert_eq!(r["per_query"].as_array().unwrap().len(), 30);
    let raw = std::fs::read_to_string(&report).unwrap();
    let (one, five, ten) = (raw.find("\"1\":").unwrap(), raw.find("\"5\":").unwrap(), raw.find("\"10\":").unwrap());
    assert!(one < five && five < ten, "recall keys out of order");
}

#[test]
fn ablate_lambda_prints_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path());
    let out = ok(&["ablate", "--dataset", &bundle, "--grid", "lambda"]);
    let lines: Vec<&str> = out.lines().filter(|l| !l.starts_with('-')).collect();
    assert_eq!(lines.len(), 5, "{out}");
    assert!(lines[0].contains("lambda_p") && lines[0].contains("MedR"));
    let params: Vec<(String, String)> = lines[1..]
        .iter()
        .map(|l| {
            let mut cells = l.split_whitespace();
            (cells.next().unwrap().to_string(), cells.next().unwrap().to_string())
        })
        .collect();
    let want = [("0.0", "0.0"), ("1.0", "0.0"), ("0.0", "0.1"), ("1.0", "0.5")];
    assert_eq!(params, want.map(|(a, b)| (a.to_string(), b.to_string())));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--trials", "100"]);
    assert_eq!(out.matches("PASS").count(), 2, "{out}");
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path());
    let ckpt = dir.path().join("adapters.cfa");
    let curve = dir.path().join("curve.json");
    let out = ok(&[
        "train",
        "--dataset",
        &bundle,
        "--sep-enc",
        "--epochs",
        "2",
        "--out",
        ckpt.to_str().unwrap(),
        "--curve",
        curve.to_str().unwrap(),
    ]);
    assert!(out.contains("untrained") && out.contains("trained"));
    assert_eq!(read_json(&curve).as_array().unwrap().len(), 2);
    ok(&["benchmark", "--dataset", &bundle, "--adapters", ckpt.to_str().unwrap()]);
}

#[test]
fn search_returns_k_lines() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path());
    let queries = std::fs::read_to_string(format!("{bundle}/queries.jsonl")).unwrap();
    let q: Value = serde_json::from_str(queries.lines().next().unwrap()).unwrap();
    let text = q["text"].as_str().unwrap();
    let first = ok(&["search", "--dataset", &bundle, "--query", text, "--k", "5"]);
    assert_eq!(first.lines().count(), 5);
    let top: Vec<&str> = first.lines().map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    let second = ok(&["search", "--dataset", &bundle, "--query", text, "--k", "5", "--likes", top[2], "--dislikes", top[0]]);
    assert_eq!(second.lines().count(), 5);
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let cases: Vec<Vec<String>> = vec![
        vec!["ingest-check".into(), "--dataset".into(), missing.to_string_lossy().into()],
        vec!["benchmark".into(), "--lambda-p=-1".into()],
        vec!["search".into(), "--query".into(), "qqzx".into()],
        vec!["gradcheck".into(), "--trials".into(), "0".into()],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = clickfeed(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }

    let bad = dir.path().join("bad.cfr");
    std::fs::write(&bad, b"CFR1\x01\x00\x00\x00").unwrap();
    let meta = dir.path().join("items.jsonl");
    std::fs::write(&meta, "").unwrap();
    let out = clickfeed(&["ingest-check", "--embeddings", bad.to_str().unwrap(), "--metadata", meta.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
