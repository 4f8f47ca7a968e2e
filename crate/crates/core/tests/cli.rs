use std::path::Path;
use std::process::{Command, Output};

use fullanno::ingest::read_enriched;
use fullanno::pipeline::compute_stats;
use fullanno::tokenizer::WhitespaceTokenizer;
use serde_json::Value;

fn fullanno(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fullanno")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn make_fixture(dir: &Path, images: &str) -> String {
    let out = fullanno(&["fixture", "--out", dir.to_str().unwrap(), "--images", images, "--seed", "5"]);
    assert!(out.status.success());
    stdout_json(&out)["config"].as_str().unwrap().to_string()
}

#[test]
fn fixture_run_stats_validate() {
    let dir = tempfile::tempdir().unwrap();
    let config = make_fixture(dir.path(), "8");

    let out = fullanno(&["run", "--config", &config, "--stage", "all", "--workers", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let outcome = stdout_json(&out);
    assert_eq!(outcome["stages"].as_array().unwrap().len(), 3);
    assert_eq!(outcome["manifest"]["line_count"], 8);

    let enriched = dir.path().join("enriched.jsonl");
    let out = fullanno(&["stats", enriched.to_str().unwrap(), "--json"]);
    assert!(out.status.success());
    let expected = compute_stats(&read_enriched(&enriched).unwrap(), &WhitespaceTokenizer);
    assert_eq!(stdout_json(&out), serde_json::json!([expected]));

    let out = fullanno(&["stats", enriched.to_str().unwrap()]);
    let table = String::from_utf8(out.stdout).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split('|').map(str::trim).collect();
    assert_eq!(header[..3], ["Dataset", "Simple Cap", "Dense Cap"]);
    assert!(table.contains("synthetic"));

    let out = fullanno(&["validate", enriched.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["violations"], serde_json::json!([]));
}

#[test]
fn tampered_file_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let config = make_fixture(dir.path(), "3");
    assert!(fullanno(&["run", "--config", &config]).status.success());
    let enriched = dir.path().join("enriched.jsonl");
    let text = std::fs::read_to_string(&enriched).unwrap();
    let kept: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    std::fs::write(&enriched, kept).unwrap();
    let out = fullanno(&["validate", enriched.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let report = stdout_json(&out);
    let fields: Vec<&str> = report["violations"].as_array().unwrap().iter().map(|v| v["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["manifest.content_sha256", "manifest.line_count"]);
}

#[test]
fn staged_run_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let config = make_fixture(dir.path(), "4");
    let out = fullanno(&["ingest", "--config", &config]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["load"]["images"], 4);
    for stage in ["1", "2", "3"] {
        let out = fullanno(&["run", "--config", &config, "--stage", stage, "--resume"]);
        assert!(out.status.success(), "stage {stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let copy = dir.path().join("copy.jsonl");
    let out = fullanno(&["export", "--config", &config, "--output", copy.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(dir.path().join("enriched.jsonl")).unwrap());
}

#[test]
fn errors_are_json_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = make_fixture(dir.path(), "2");
    let out = fullanno(&["run", "--config", &config, "--stage", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config_error");

    let out = fullanno(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io_error");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(fullanno(&["run", "--config", "x.json", "--stage", "9"]).status.code(), Some(2));
    assert_eq!(fullanno(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fullanno(&["stats"]).status.code(), Some(2));
}
