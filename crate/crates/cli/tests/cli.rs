use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use protodx::corpus::{load_corpus, LoadOptions};
use protodx::protonet::load_model;
use protodx_server::{AppState, PrototypesResponse};

fn protodx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protodx"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = protodx(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_overfit(dir: &Path) {
    ok(&["gen-data", "--preset", "overfit", "--seed", "3", "--out", s(dir)]);
}

fn train_overfit(data: &Path, out: &Path, variant: &str, steps: &str) {
    ok(&[
        "train",
        "--train",
        s(&data.join("train.jsonl")),
        "--val",
        s(&data.join("val.jsonl")),
        "--preset",
        "overfit",
        "--variant",
        variant,
        "--steps",
        steps,
        "--out",
        s(out),
    ]);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_byte_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen_overfit(&a);
    gen_overfit(&b);
    let fa = dir_bytes(&a);
    let fb = dir_bytes(&b);
    let names: Vec<_> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for f in ["corpus.jsonl", "labels.txt", "manifest.json", "test.jsonl", "train.jsonl", "truth.json", "val.jsonl"] {
        assert!(names.contains(&f), "missing {f}");
    }
    // The manifest records the output path, so compare everything else.
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "manifest.json" {
            assert_eq!(ba, bb, "{na} differs");
        }
    }
    let m: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["outputs"].as_object().unwrap().len(), 6);

    let spec = t.path().join("spec.json");
    fs::write(&spec, r#"{"n_docs": 40, "n_labels": 5}"#).unwrap();
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&t.path().join("c"))]);
    let labels = fs::read_to_string(t.path().join("c/labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 5);
}

#[test]
fn training_twice_writes_identical_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_overfit(&data);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    train_overfit(&data, &a, "proto_labelwise", "40");
    train_overfit(&data, &b, "proto_labelwise", "40");
    assert_eq!(dir_bytes(&a.join("model")), dir_bytes(&b.join("model")));
    assert_eq!(fs::read(a.join("stats.json")).unwrap(), fs::read(b.join("stats.json")).unwrap());
}

#[test]
fn eval_prints_loss_and_metrics() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_overfit(&data);
    let m = t.path().join("m");
    train_overfit(&data, &m, "linear_labelwise", "30");
    let out = ok(&[
        "eval",
        "--model",
        s(&m.join("model")),
        "--corpus",
        s(&data.join("test.jsonl")),
        "--buckets",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["documents", "loss", "loss_per_term", "roc_auc_macro", "roc_auc_micro", "pr_auc_macro", "per_label", "buckets"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["documents"], 32);
    assert_eq!(v["per_label"].as_array().unwrap().len(), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("macro ROC AUC"));

    // With --out the same JSON goes to a file next to a manifest.
    let e = t.path().join("e");
    ok(&["eval", "--model", s(&m.join("model")), "--corpus", s(&data.join("test.jsonl")), "--out", s(&e)]);
    let file: Value = serde_json::from_slice(&fs::read(e.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(file, v);
    assert!(e.join("manifest.json").exists());
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| protodx(args).status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train"]), 1);
    assert_eq!(code(&["gen-data", "--preset", "desk", "--bogus", "--out", "x"]), 1);
    assert_eq!(code(&["gen-data", "--preset", "nope", "--out", s(&t.path().join("n"))]), 1);
    assert_eq!(code(&["eval", "--model", s(&t.path().join("missing")), "--corpus", "x.jsonl"]), 1);

    let data = t.path().join("data");
    gen_overfit(&data);
    let broken = t.path().join("broken.jsonl");
    fs::write(&broken, "{\"id\": \"a\", \"text\": \n").unwrap();
    let train = data.join("train.jsonl");
    assert_eq!(
        code(&["train", "--train", s(&broken), "--val", s(&train), "--out", s(&t.path().join("b"))]),
        1
    );
    assert_eq!(
        code(&["train", "--train", s(&train), "--val", s(&train), "--variant", "nope", "--out", s(&t.path().join("b"))]),
        1
    );

    // A diverging run fails with code 2 and leaves diagnostics behind.
    let bad = t.path().join("bad");
    let out = protodx(&[
        "train", "--train", s(&train), "--val", s(&train), "--preset", "overfit", "--lr-encoder", "1e30",
        "--lr-head", "1e30", "--out", s(&bad),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let diag: Value = serde_json::from_slice(&fs::read(bad.join("diagnostics.json")).unwrap()).unwrap();
    assert!(diag["failure"]["error"].as_str().unwrap().contains("non-finite"));
    assert!(diag["failure"]["batch"].is_array());
    assert!(!bad.join("model").exists());
}

#[test]
fn explain_exemplars_match_the_prototypes_endpoint() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_overfit(&data);
    let m = t.path().join("m");
    train_overfit(&data, &m, "proto_labelwise", "60");
    let train = data.join("train.jsonl");
    let out = ok(&[
        "explain", "--model", s(&m.join("model")), "--corpus", s(&data.join("test.jsonl")), "--train-corpus",
        s(&train), "--doc-id", "doc00004", "--top-k", "4", "--exemplars", "3",
    ]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let labels = report["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 4);

    let model = load_model(m.join("model")).unwrap();
    let opts = LoadOptions {
        vocab: Some(model.vocab.clone()),
        labels: Some(model.labels.clone()),
        max_len: model.encoder_config.max_len,
    };
    let corpus = load_corpus(&train, &opts).unwrap();
    assert_eq!(report["model_hash"].as_str().unwrap(), model.model_hash().unwrap());
    let app = protodx_server::router(Arc::new(AppState::new(model, Some(corpus)).unwrap()), &[]).unwrap();

    let rt = tokio::runtime::Runtime::new().unwrap();
    for l in labels {
        let name = l["label"].as_str().unwrap();
        let req = Request::get(format!("/prototypes/{name}?k=3")).body(Body::empty()).unwrap();
        let resp = rt.block_on(app.clone().oneshot(req)).unwrap();
        assert_eq!(resp.status(), 200);
        let body = rt.block_on(resp.into_body().collect()).unwrap().to_bytes();
        let served: PrototypesResponse = serde_json::from_slice(&body).unwrap();
        let cli = l["exemplars"].as_array().unwrap();
        assert_eq!(cli.len(), served.exemplars.len(), "{name}");
        assert!(!cli.is_empty());
        for (c, s) in cli.iter().zip(&served.exemplars) {
            assert_eq!(c["doc_id"].as_str().unwrap(), s.doc_id);
            assert_eq!(c["distance"].as_f64().unwrap(), s.distance);
            let spans: Vec<[usize; 2]> = serde_json::from_value(c["top_spans"].clone()).unwrap();
            assert_eq!(spans, s.top_spans);
        }
    }

    let html = ok(&[
        "explain", "--model", s(&m.join("model")), "--corpus", s(&data.join("test.jsonl")), "--doc-id", "doc00004",
        "--format", "html",
    ]);
    let html = String::from_utf8(html.stdout).unwrap();
    assert!(html.starts_with("<!DOCTYPE html>"));
    assert_eq!(html.matches("class=\"highlight\"").count(), 4);

    let missing = protodx(&[
        "explain", "--model", s(&m.join("model")), "--corpus", s(&data.join("test.jsonl")), "--doc-id", "nope",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn faithfulness_writes_one_report_per_method() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_overfit(&data);
    let m = t.path().join("m");
    train_overfit(&data, &m, "proto_labelwise", "60");
    let f = t.path().join("f");
    ok(&[
        "faithfulness", "--model", s(&m.join("model")), "--corpus", s(&data.join("test.jsonl")), "--labels", "D00,D01",
        "--out", s(&f),
    ]);
    let v: Value = serde_json::from_slice(&fs::read(f.join("faithfulness.json")).unwrap()).unwrap();
    let reports = v.as_array().unwrap();
    assert_eq!(reports.len(), 5);
    for r in reports {
        assert_eq!(r["thresholds"].as_array().unwrap().len(), 10);
        assert_eq!(r["per_label_scores"].as_array().unwrap().len(), 2);
    }
    let unknown = protodx(&[
        "faithfulness", "--model", s(&m.join("model")), "--corpus", s(&data.join("test.jsonl")), "--labels", "ZZZ",
        "--out", s(&f),
    ]);
    assert_eq!(unknown.status.code(), Some(1));
}
