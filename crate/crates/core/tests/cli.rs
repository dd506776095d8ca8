use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "scenario": {"num_slots": 10},
  "train": {"episodes": 2, "batch_size": 8, "td3": {"hidden": [8]}},
  "checkpoint_every": 1
}"#;

fn sixdma(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sixdma"))
        .args(args)
        .current_dir(cwd)
        .env("SIXDMA_WORKERS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&sixdma(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&sixdma(&["train", "--episodes", "many"], tmp.path())), 1);
    assert_eq!(code(&sixdma(&["train", "--scheme", "9"], tmp.path())), 1);
    assert_eq!(code(&sixdma(&["train", "--sweep-tr", "7"], tmp.path())), 1);
    assert_eq!(code(&sixdma(&["train", "--config", "absent.json"], tmp.path())), 1);
    assert_eq!(code(&sixdma(&["--help"], tmp.path())), 0);
}

#[test]
fn invalid_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), r#"{"scenario": {"wavelength": -1}}"#).unwrap();
    let out = sixdma(&["train", "--config", "bad.json"], tmp.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn train_compare_profile_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.json"), TINY).unwrap();
    let common = ["--desk", "--config", "tiny.json", "--scheme", "1", "--seed", "0", "--out", "out"];

    let missing = sixdma(&[&["compare"][..], &common].concat(), tmp.path());
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("scheme1/seed0"));

    assert_eq!(code(&sixdma(&[&["train"][..], &common].concat(), tmp.path())), 0);
    let again = sixdma(&[&["train", "--resume"][..], &common].concat(), tmp.path());
    assert_eq!(code(&again), 0);
    assert!(String::from_utf8_lossy(&again.stdout).starts_with("Skipped"));

    assert_eq!(code(&sixdma(&[&["compare"][..], &common].concat(), tmp.path())), 0);
    assert!(tmp.path().join("out/compare/summary.csv").exists());

    let prof = sixdma(&["profile", "--checkpoint", "out/scheme1/seed0", "--calls", "100"], tmp.path());
    assert_eq!(code(&prof), 0);
    let stdout = String::from_utf8_lossy(&prof.stdout);
    let agents: Vec<&str> = stdout.lines().skip(1).filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(agents, vec!["uav0", "uav1", "beam", "sixdma"]);
}
