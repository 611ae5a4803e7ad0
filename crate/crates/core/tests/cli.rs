use std::process::Command;

fn povss(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_povss")).args(args).output().unwrap()
}

#[test]
fn zero_iterations_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data = data.to_str().unwrap();
    assert_eq!(povss(&["synth", "--out", data, "--n-test-pos", "2", "--n-test-neg", "2"]).status.code(), Some(0));
    let out = dir.path().join("s.state");
    let o = povss(&["personalize", "--data", data, "--out", out.to_str().unwrap(), "--iters", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--iters"));
    assert!(!out.exists());
}

#[test]
fn gradcheck_defaults_print_one_line() {
    let o = povss(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.contains("PASS"));
}

#[test]
fn frozen_only_eval_needs_no_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data = data.to_str().unwrap();
    povss(&["synth", "--out", data, "--n-test-pos", "2", "--n-test-neg", "2"]);
    let report = dir.path().join("r.tsv");
    let o = povss(&["eval", "--data", data, "--frozen-only", "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.starts_with("metric\tvalue\n"));
    assert!(text.contains("iou_per\t0.0000"));
}

#[test]
fn infeasible_synth_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = povss(&["synth", "--out", dir.path().join("d").to_str().unwrap(), "--proposals", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(povss(&["segment"]).status.code(), Some(1));
}
