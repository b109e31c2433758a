mod common;

use std::io::Write;
use std::process::{Command, Stdio};

use common::{bin, pipeline, semrank, stdout_json, try_semrank, workspace_root};

fn error_json(out: &std::process::Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8_lossy(&out.stderr)
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("JSON error line")
        .to_owned();
    serde_json::from_str(&line).unwrap()
}

#[test]
fn desk_pipeline_runs_and_writes_snapshots() {
    let root = workspace_root();
    let work = tempfile::tempdir().unwrap();
    let cfg = root.join("configs/desk.toml");
    let p = pipeline(
        &root.join("data/synthetic"),
        work.path(),
        &["--config", cfg.to_str().unwrap(), "--set", "mock_policy.kind=promote-target"],
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][1]["metrics"]["recall@1"], 1.0);
    assert!(report["rows"][0]["metrics"]["recall@1"].as_f64().unwrap() < 1.0);
    assert!(p.uniqueness["uniqueness_rate"].as_f64().unwrap() > 0.9);
    for name in ["evaluate.resolved.toml", "report.csv", "report.txt"] {
        assert!(p.eval_dir.join(name).exists(), "{name}");
    }
    let snap = std::fs::read_to_string(p.split.join("ingest.resolved.toml")).unwrap();
    assert!(snap.contains("seed = 2024"));

    let rep = semrank(&["uniqueness-report", "--registry", p.registry.to_str().unwrap()]);
    assert_eq!(stdout_json(&rep), p.uniqueness);
}

#[test]
fn missing_input_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = try_semrank(&[
        "uniqueness-report",
        "--registry",
        dir.path().join("nope.jsonl").to_str().unwrap(),
    ]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("nope.jsonl"));
}

#[test]
fn overrides_show_in_resolved_config() {
    let out = semrank(&["config", "--set", "codebook.epochs=3", "--set", "seed=9"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(v["seed"].as_integer(), Some(9));
    assert_eq!(v["codebook"]["epochs"].as_integer(), Some(3));
    let derived = v["codebook"]["seed"].as_integer().unwrap();
    assert!(derived >= 0);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let out = try_semrank(&["config", "--set", "codebook.epoch=3"]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn parse_check_reads_stdin() {
    let mut child = Command::new(bin())
        .arg("parse-check")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"raw\":\"{\\\"recommendations\\\":[\\\"2\\\",\\\"1\\\",\\\"3\\\"]}\",\"n\":3}\n{\"raw\":\"nothing\",\"n\":3}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["ranking"], serde_json::json!([1, 0, 2]));
    assert!(lines[1]["ranking"].is_null());
}
