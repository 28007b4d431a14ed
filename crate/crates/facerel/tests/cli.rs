use std::path::Path;
use std::process::{Command, Output};

use facerel::artifacts::OUTPUT_DIR_ENV;
use facerel::cli::PredictionLine;
use facerel::manifest::PairManifest;
use facerel_core::synth::SynthSpec;

fn facerel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facerel"))
        .current_dir(dir)
        .env_remove(OUTPUT_DIR_ENV)
        .args(args)
        .output()
        .unwrap()
}

fn tiny_spec() -> SynthSpec {
    let mut spec = SynthSpec::default();
    for c in &mut spec.corpora {
        c.size = 12;
    }
    spec.relation.train = 16;
    spec.relation.test = 24;
    spec
}

fn synth(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), toml::to_string(&tiny_spec()).unwrap()).unwrap();
    let out = facerel(dir, &["synth-data", "--spec", "tiny.toml", "--out", "data", "--video-frames", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(facerel(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(facerel(dir.path(), &["eval", "--pairs", "x.txt"]).status.code(), Some(1));
    assert_eq!(facerel(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = facerel(dir.path(), &["eval", "--pairs", "nope.txt", "--preds", "nope.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[relation]\nlr = -1.0\n").unwrap();
    let out = facerel(dir.path(), &["--config", "bad.toml", "gradcheck"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let first = std::fs::read(dir.path().join("data/test.txt")).unwrap();
    let again = facerel(dir.path(), &["synth-data", "--spec", "tiny.toml", "--out", "data", "--video-frames", "4"]);
    assert_eq!(again.status.code(), Some(1));
    let forced = facerel(dir.path(), &["--force", "synth-data", "--spec", "tiny.toml", "--out", "data", "--video-frames", "4"]);
    assert!(forced.status.success());
    assert_eq!(std::fs::read(dir.path().join("data/test.txt")).unwrap(), first);
    assert!(dir.path().join("data/spec.toml.run.toml").exists());
}

#[test]
fn output_dir_override_redirects_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let redirected = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), toml::to_string(&tiny_spec()).unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_facerel"))
        .current_dir(dir.path())
        .env(OUTPUT_DIR_ENV, redirected.path())
        .args(["synth-data", "--spec", "tiny.toml", "--out", "data", "--video-frames", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(redirected.path().join("data/train.txt").exists());
    assert!(!dir.path().join("data").exists());
}

#[test]
fn eval_scores_label_copies_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let manifest = PairManifest::parse(&std::fs::read_to_string(dir.path().join("data/test.txt")).unwrap()).unwrap();
    let lines: String = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let line = PredictionLine {
                pair: i,
                image: r.image.display().to_string(),
                probabilities: r.relations.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect(),
            };
            serde_json::to_string(&line).unwrap() + "\n"
        })
        .collect();
    std::fs::write(dir.path().join("perfect.jsonl"), lines).unwrap();
    let out = facerel(
        dir.path(),
        &["eval", "--pairs", "data/test.txt", "--preds", "perfect.jsonl", "--out", "report.jsonl"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let score = v.get("balanced_accuracy").or_else(|| v.get("mean")).unwrap();
        assert!(score.is_null() || score.as_f64() == Some(1.0), "{line}");
    }
    assert!(dir.path().join("report.jsonl.run.toml").exists());

    // a prediction file for a different manifest is rejected
    let short: String = std::fs::read_to_string(dir.path().join("perfect.jsonl")).unwrap().lines().skip(1).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.path().join("short.jsonl"), short).unwrap();
    let out = facerel(dir.path(), &["eval", "--pairs", "data/test.txt", "--preds", "short.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}
