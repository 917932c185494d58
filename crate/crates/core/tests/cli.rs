use std::path::Path;
use std::process::{Command, Output};

fn sphdiff(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphdiff")).args(args).current_dir(dir).env_remove("SPHDIFF_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = "widths = [2, 4]\nencoder_hidden = [4]\nencoder_out = 4\nepochs = 1\ndemos = 2\neval_rollouts = 2\n";

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sphdiff(&["no-such-command"], dir.path())), 2);
    assert_eq!(code(&sphdiff(&["eval", "--ckpt", "x", "--rotations", "sideways"], dir.path())), 2);
    assert_eq!(code(&sphdiff(&["ablate", "--which", "degree:zero"], dir.path())), 2);
    assert_eq!(code(&sphdiff(&["--help"], dir.path())), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "epochs = 1\nbogus = 2\n").unwrap();
    let o = sphdiff(&["train", "--config", "bad.toml", "--out", "run"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = sphdiff(&["eval", "--ckpt", "missing/checkpoint.json", "--out", "ev"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_thread_count_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sphdiff"))
        .args(["gen-demos", "--n", "1", "--out", "d.jsonl"])
        .current_dir(dir.path())
        .env("SPHDIFF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_demos_writes_data_and_resolved_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = sphdiff(&["gen-demos", "--n", "3", "--seed", "4", "--out", "data/demos.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("data/demos.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("data/demos.resolved.toml").exists());
    assert!(dir.path().join("data/demos.sha256").exists());
    let again = sphdiff(&["gen-demos", "--n", "3", "--seed", "4", "--out", "again.jsonl"], dir.path());
    assert_eq!(code(&again), 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("again.jsonl")).unwrap(), text);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = sphdiff(&["train", "--config", "tiny.toml", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.json", "loss.csv", "config.resolved.toml", "config.sha256"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("run/.sphdiff.lock").exists());

    let o = sphdiff(&["eval", "--ckpt", "run/checkpoint.json", "--rotations", "tilt:30", "--rollouts", "2", "--out", "ev"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["rollouts"], 2);
    for f in ["eval_tilt_30.json", "eval_tilt_30.csv", "eval_tilt_30_rollouts.csv", "config.resolved.toml", "config.sha256"] {
        assert!(dir.path().join("ev").join(f).exists(), "{f}");
    }
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    std::fs::create_dir(dir.path().join("run")).unwrap();
    std::fs::write(dir.path().join("run/.sphdiff.lock"), "").unwrap();
    let o = sphdiff(&["train", "--config", "tiny.toml", "--out", "run"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
    assert!(!dir.path().join("run/checkpoint.json").exists());
}
