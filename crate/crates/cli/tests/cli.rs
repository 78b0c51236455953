//! End-to-end runs of the `slotter` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    root().join("data/fixtures").join(name)
}

fn slotter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotter"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_reports_default_counts() {
    let text = stdout(&slotter(&["params"]));
    assert!(text.contains("993886"), "{text}");
    assert!(text.contains("219742"), "{text}");
    assert!(text.contains("4.52"), "{text}");
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    assert_eq!(slotter(&["params", "--bogus"]).status.code(), Some(2));
    assert_eq!(slotter(&[]).status.code(), Some(2));
    let out = slotter(&[
        "subset",
        "--in",
        "/nonexistent/x.jsonl",
        "--denominator",
        "2",
        "--out",
        "/tmp/y.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.jsonl"));
}

#[test]
fn subset_of_8198_lines_at_one_64th() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("all.jsonl");
    let lines: String = (0..8198)
        .map(|i| format!("{{\"text\": \"row {i}\", \"spans\": []}}\n"))
        .collect();
    fs::write(&input, lines).unwrap();
    let out = dir.path().join("sub.jsonl");
    stdout(&slotter(&[
        "subset",
        "--in",
        s(&input),
        "--denominator",
        "64",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 128);
}

#[test]
fn train_evaluate_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    let data = fixture("sample.conll");
    let config = root().join("configs/tiny.json");
    stdout(&slotter(&[
        "train",
        "--config",
        s(&config),
        "--train",
        s(&data),
        "--dev",
        s(&data),
        "--out",
        s(&ckpt),
    ]));
    for file in ["manifest.json", "params.bin", "train_log.jsonl", "run.json"] {
        assert!(ckpt.join(file).exists(), "{file}");
    }

    let report = dir.path().join("eval.json");
    let table = stdout(&slotter(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--test",
        s(&data),
        "--report",
        s(&report),
    ]));
    assert!(table.contains("1.000"), "{table}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["scores"]["micro"]["f1"], 1.0, "{json}");

    let line = stdout(&slotter(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--text",
        "book a table for four at seven pm",
    ]));
    let pred: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(pred["text"], "book a table for four at seven pm");
    assert!(pred["spans"].is_array());
}

#[test]
fn convert_writes_canonical_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    for (format, file) in [
        ("restaurants8k", "restaurants8k_sample.json"),
        ("mtop", "mtop_sample.tsv"),
        ("atis", "atis_sample.iob"),
    ] {
        let out = dir.path().join(format!("{format}.jsonl"));
        stdout(&slotter(&[
            "convert",
            "--format",
            format,
            "--in",
            s(&fixture(file)),
            "--out",
            s(&out),
        ]));
        assert_eq!(
            fs::read_to_string(&out).unwrap().lines().count(),
            5,
            "{format}"
        );
    }
    assert_eq!(
        slotter(&["convert", "--format", "xml", "--in", "a", "--out", "b"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn substitute_rejects_seen_values() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("sample.conll");
    let values = dir.path().join("values.txt");
    let out = dir.path().join("out.jsonl");

    fs::write(&values, "eleven\ntwelve\n").unwrap();
    stdout(&slotter(&[
        "substitute",
        "--in",
        s(&input),
        "--slot",
        "people",
        "--values",
        s(&values),
        "--out",
        s(&out),
    ]));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("eleven") || text.contains("twelve"), "{text}");

    fs::write(&values, "four\n").unwrap();
    let seen = slotter(&[
        "substitute",
        "--in",
        s(&input),
        "--slot",
        "people",
        "--values",
        s(&values),
        "--out",
        s(&out),
    ]);
    assert_eq!(seen.status.code(), Some(1));
}

#[test]
fn synth_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&slotter(&[
        "synth",
        "--out-dir",
        s(dir.path()),
        "--train-size",
        "20",
        "--dev-size",
        "5",
        "--test-size",
        "7",
    ]));
    for (split, n) in [("train", 20), ("dev", 5), ("test", 7)] {
        let text = fs::read_to_string(dir.path().join(format!("flights_{split}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), n, "{split}");
    }
}
