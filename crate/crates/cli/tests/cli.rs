use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use neurodecode::dataset::load_session;
use neurodecode::engine::stream_recording;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neurodecode"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "synth", "--out", p(dir), "--seed", seed, "--reps", "2", "--gestures", "100000,000001,011111",
        "--hold-s", "0.6", "--rest-s", "0.6",
    ]);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "run.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

/// A small trained checkpoint next to its data.
fn trained(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    synth(&data, "3");
    let ck = tmp.join("model.ndm");
    let out = ok(&[
        "train", "--data", p(&data), "--split", "--out", p(&ck), "--seeds", "1", "--epochs", "1", "--stride", "5",
    ]);
    assert!(out.contains("seed 1"), "{out}");
    (data, ck)
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "7");
    synth(&b, "7");
    synth(&c, "8");
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "synth");
    assert_eq!(run["seeds"][0], 7);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, "1");
    // Existing output without --force.
    assert_eq!(code(&["synth", "--out", p(&d), "--reps", "1"]), 2);
    assert_eq!(code(&["synth", "--out", p(&d), "--reps", "1", "--force"]), 0);
    assert_eq!(code(&["synth", "--out", p(&tmp.path().join("e")), "--gestures", "10000x"]), 2);
    // One session needs --split.
    assert_eq!(code(&["train", "--data", p(&d), "--out", p(&tmp.path().join("m.ndm"))]), 2);
    assert_eq!(code(&["eval", "--model", p(&tmp.path().join("missing.ndm")), "--data", p(&d)]), 2);
    assert_eq!(code(&["train", "--data", p(&tmp.path().join("nowhere")), "--split", "--out", "x.ndm"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
}

#[test]
fn train_eval_match_and_serve() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = trained(tmp.path());
    assert!(ck.with_extension("report.json").exists() || tmp.path().join("model.report.json").exists());

    let eval_dir = tmp.path().join("eval");
    let out = ok(&["eval", "--model", p(&ck), "--data", p(&data), "--out", p(&eval_dir)]);
    assert!(out.contains("thumb"), "{out}");
    assert_eq!(std::fs::read_to_string(eval_dir.join("metrics.jsonl")).unwrap().lines().count(), 6);

    let m = tmp.path().join("match");
    let out = ok(&["match", "--model", p(&ck), "--trials", "6", "--out", p(&m), "--sequential"]);
    assert!(out.contains("all"), "{out}");
    assert_eq!(std::fs::read_to_string(m.join("trials.jsonl")).unwrap().lines().count(), 6);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(m.join("report.json")).unwrap()).unwrap();
    assert!((report["bits_per_trial"].as_f64().unwrap() - 5.0).abs() < 1e-12);

    // Wrong channel count for the profile.
    assert_eq!(code(&["match", "--model", p(&ck), "--profile", "ulnar8", "--out", p(&m)]), 2);

    let serve_dir = tmp.path().join("serve");
    let mut child = bin()
        .args(["serve", "--model", p(&ck), "--endpoint", "127.0.0.1:0", "--max-sessions", "1", "--out", p(&serve_dir)])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    let rec = load_session(&data).unwrap().recording().unwrap().slice(0, 20_000).unwrap();
    let served = stream_recording(addr.as_str(), &rec, 200).unwrap();
    assert!(served.error.is_none());
    assert!(!served.predictions.is_empty());
    assert!(child.wait().unwrap().success());
    assert_eq!(std::fs::read_to_string(serve_dir.join("sessions.jsonl")).unwrap().lines().count(), 1);
}
