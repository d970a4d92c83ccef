use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autolabel")).args(args).output().expect("runs the CLI")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, "[world]\nnum_frames = 24\nnum_objects = 3\n").unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn simulate_annotate_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let seq = dir.path().join("seq");
    assert!(run(&["--config", &cfg, "simulate", "--out", s(&seq), "--name", "a"]).status.success());
    assert!(seq.join("seqinfo.toml").exists());

    let out = dir.path().join("out");
    assert!(run(&["annotate", "--seq", s(&seq), "--out", s(&out)]).status.success());
    let report = dir.path().join("report.json");
    let r = run(&[
        "evaluate",
        "--pred",
        s(&out.join("a.mot.txt")),
        "--gt",
        s(&seq.join("gt/gt.txt")),
        "--out",
        s(&report),
        "--name",
        "a",
    ]);
    assert!(r.status.success());
    let stdout = String::from_utf8(r.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("mota\t")));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json.is_array());
}

#[test]
fn detect_writes_unassigned_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let seq = dir.path().join("seq");
    assert!(run(&["--config", &cfg, "simulate", "--out", s(&seq), "--name", "d"]).status.success());
    let out = dir.path().join("det");
    assert!(run(&["detect", "--seq", s(&seq), "--out", s(&out)]).status.success());
    let text = fs::read_to_string(out.join("d.det.txt")).unwrap();
    assert!(!text.is_empty());
    assert!(text.lines().all(|l| l.split(',').nth(1) == Some("-1")));
}

#[test]
fn deploy_over_a_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    for (name, seed) in [("s1", "1"), ("s2", "2")] {
        let seq = data.join(name);
        assert!(run(&["--config", &cfg, "--seed", seed, "simulate", "--out", s(&seq), "--name", name]).status.success());
    }
    let out = dir.path().join("out");
    let r = run(&["--config", &cfg, "deploy", "--seq", s(&data), "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8(r.stdout).unwrap();
    assert!(stdout.starts_with("representative\t"));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("qa\t")).count(), 2);
    assert!(out.join("s1.jsonl").exists() && out.join("s2.mot.txt").exists());
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[chunker]\nchi = 10\nomega = 12\n").unwrap();
    let r = run(&["--config", s(&bad), "simulate", "--out", s(&dir.path().join("x"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("chunker.omega"));

    let missing = dir.path().join("missing.txt");
    let r = run(&["evaluate", "--pred", s(&missing), "--gt", s(&missing)]);
    assert_eq!(r.status.code(), Some(3));

    let r = run(&["resume", "--seq", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert!(!r.status.success());
}
