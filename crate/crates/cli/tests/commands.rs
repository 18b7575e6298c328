use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tmlevt::eval::{bucket_edges, bucket_index, corpus_bleu};
use tmlevt::tm_index::parse_match_dump;
use tmlevt_cli::commands::read_jsonl;
use tmlevt_cli::pipeline::TestItem;

fn tmlevt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmlevt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = tmlevt(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &[&str] = &[
    "--seed",
    "3",
    "--set",
    "split.high=15",
    "--set",
    "split.mid=15",
    "--set",
    "split.heldout=10",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn synth_index_retrieve_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &with(SMALL, &["synth", "--out", "c.jsonl", "--n", "400"]));
    ok(d, &with(SMALL, &["index", "--corpus", "c.jsonl", "--out", "c.idx"]));
    ok(d, &with(SMALL, &["retrieve", "--index", "c.idx", "--queries", "c.jsonl", "--out", "m.jsonl", "--exclude-self"]));
    let bytes = std::fs::read(d.join("c.idx")).unwrap();
    assert_eq!(&bytes[..8], b"TMIX0001");
    let dump = parse_match_dump(&std::fs::read_to_string(d.join("m.jsonl")).unwrap()).unwrap();
    assert_eq!(dump.len(), 400);
    for (q, ms) in &dump {
        assert!(ms.len() <= 3);
        assert!(ms.windows(2).all(|w| w[0].sim >= w[1].sim));
        for m in ms {
            assert_ne!(m.segment_id, *q);
            assert!((0.4..1.0).contains(&m.sim));
        }
    }
    assert!(dump.iter().any(|(_, ms)| !ms.is_empty()));
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 3);
    assert!(meta["artifact_version"].is_string());

    let stats = tmlevt(d, &["ingest", "--corpus", "c.jsonl"]);
    let stats: Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(stats["total"]["count"], 400);
}

/// Prepare a small corpus and return the test items.
fn prepared(d: &Path) -> Vec<TestItem> {
    ok(d, &with(SMALL, &["synth", "--out", "c.jsonl", "--n", "600"]));
    ok(d, &with(SMALL, &["prepare", "--corpus", "c.jsonl", "--out-dir", "prep"]));
    for f in ["train.jsonl", "test.jsonl", "heldout.jsonl", "vocab.json", "manifest.json"] {
        assert!(d.join("prep").join(f).exists(), "{f}");
    }
    read_jsonl(&d.join("prep/test.jsonl")).unwrap()
}

#[test]
fn copy_decode_reproduces_tm_and_eval_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let items = prepared(d);
    assert_eq!(items.len(), 30);
    ok(d, &with(SMALL, &["decode", "--policy", "copy", "--test", "prep/test.jsonl", "--out", "h.jsonl"]));
    let hyps: Vec<Value> = read_jsonl(&d.join("h.jsonl")).unwrap();
    for (it, h) in items.iter().zip(&hyps) {
        assert_eq!(h["id"], it.id);
        assert_eq!(h["hyp"].as_str().unwrap(), it.tm_tgt.clone().unwrap_or_default());
    }

    ok(d, &with(SMALL, &["eval", "--test", "prep/test.jsonl", "--hyps", "h.jsonl", "--out", "r.json", "--bucket-csv", "b.csv"]));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 3);
    let edges = bucket_edges(0.3, 0.1);
    let mut groups: Vec<(Vec<Vec<String>>, Vec<Vec<String>>)> = vec![Default::default(); edges.len()];
    for it in &items {
        let b = bucket_index(&edges, it.sim.unwrap_or(0.0));
        groups[b].0.push(words(it.tm_tgt.as_deref().unwrap_or("")));
        groups[b].1.push(words(&it.tgt));
    }
    let rows = report["buckets"].as_array().unwrap();
    assert_eq!(rows.len(), edges.len());
    for (row, (copy, refs)) in rows.iter().zip(&groups) {
        assert_eq!(row["n"].as_u64().unwrap() as usize, refs.len());
        if refs.is_empty() {
            assert!(row["bleu_copy"].is_null());
            continue;
        }
        let expect = corpus_bleu(copy, refs).unwrap();
        assert!((row["bleu_copy"].as_f64().unwrap() - expect).abs() < 1e-9);
        // copy hypotheses make the main column the copy column
        assert!((row["bleu_tm"].as_f64().unwrap() - expect).abs() < 1e-9);
    }
    let csv = std::fs::read_to_string(d.join("b.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "bucket_lo,bucket_hi,n,bleu_copy,bleu_no_tm,bleu_tm");
    assert_eq!(csv.lines().count(), edges.len() + 1);
}

#[test]
fn oracle_decode_scores_100() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepared(d);
    ok(d, &with(SMALL, &["decode", "--policy", "oracle", "--test", "prep/test.jsonl", "--out", "h.jsonl", "--traces", "t.jsonl"]));
    ok(d, &with(SMALL, &["eval", "--test", "prep/test.jsonl", "--hyps", "h.jsonl", "--out", "r.json"]));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!((report["bleu"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert!(report["mean_iterations"].as_f64().unwrap() <= 2.0);
    let traces: Vec<Value> = read_jsonl(&d.join("t.jsonl")).unwrap();
    assert_eq!(traces.len(), 30);
}

#[test]
fn failures_exit_nonzero_with_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.jsonl"), "{\"domain\":\"x\",\"src\":\"\",\"tgt\":\"a\"}\n").unwrap();
    let cases: [&[&str]; 4] = [
        &["index", "--corpus", "missing.jsonl", "--out", "x.idx"],
        &["index", "--corpus", "bad.jsonl", "--out", "x.idx"],
        &["--set", "retrieval.k=0", "synth", "--out", "c.jsonl"],
        &["--set", "no.such.key=1", "synth", "--out", "c.jsonl"],
    ];
    for args in cases {
        let out = tmlevt(d, args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        let v: Value = serde_json::from_str(err.trim()).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string());
    }
}

