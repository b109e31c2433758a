#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_semrank")
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Run the binary and return its output, panicking with stderr on failure.
pub fn semrank(args: &[&str]) -> Output {
    let out = try_semrank(args);
    assert!(
        out.status.success(),
        "semrank {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn try_semrank(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .expect("spawn semrank")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Paths produced by [`pipeline`].
pub struct Pipeline {
    pub split: PathBuf,
    pub registry: PathBuf,
    pub episodes: PathBuf,
    pub outputs: PathBuf,
    pub scoring: PathBuf,
    pub scores: PathBuf,
    pub eval_dir: PathBuf,
    pub score_summary: serde_json::Value,
    pub uniqueness: serde_json::Value,
}

/// ingest, refine-embed, train-codebook, tokenize, episodes, mock-policy,
/// score-rewards, evaluate. `extra` are leading global flags.
pub fn pipeline(data: &Path, work: &Path, extra: &[&str]) -> Pipeline {
    let p = |name: &str| work.join(name);
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let run = |args: &[String]| {
        let mut all: Vec<&str> = extra.to_vec();
        all.extend(args.iter().map(String::as_str));
        semrank(&all)
    };
    let split = p("split");
    let refined = p("refined.bin");
    let ckpt = p("codebook.ck");
    let registry = p("registry.jsonl");
    let episodes = p("episodes.jsonl");
    let outputs = p("outputs.jsonl");
    let scoring = p("scoring.jsonl");
    let scores = p("scores.json");
    let eval_dir = p("eval");

    run(&["ingest".into(), "--interactions".into(), s(&data.join("interactions.jsonl")),
        "--metadata".into(), s(&data.join("metadata.jsonl")), "--out-dir".into(), s(&split)]);
    run(&["refine-embed".into(), "--embeddings".into(), s(&data.join("embeddings.bin")),
        "--split".into(), s(&split), "--out".into(), s(&refined)]);
    run(&["train-codebook".into(), "--embeddings".into(), s(&refined), "--out".into(), s(&ckpt)]);
    let tok = run(&["tokenize".into(), "--embeddings".into(), s(&refined),
        "--checkpoint".into(), s(&ckpt), "--out".into(), s(&registry)]);
    run(&["episodes".into(), "--split".into(), s(&split), "--out".into(), s(&episodes)]);
    run(&["mock-policy".into(), "--episodes".into(), s(&episodes), "--outputs".into(), s(&outputs),
        "--scoring".into(), s(&scoring)]);
    let sc = run(&["score-rewards".into(), "--input".into(), s(&scoring), "--out".into(), s(&scores)]);
    run(&["evaluate".into(), "--episodes".into(), s(&episodes), "--outputs".into(), s(&outputs),
        "--out-dir".into(), s(&eval_dir)]);
    Pipeline {
        split,
        registry,
        episodes,
        outputs,
        scoring,
        scores,
        eval_dir,
        score_summary: stdout_json(&sc),
        uniqueness: stdout_json(&tok),
    }
}
