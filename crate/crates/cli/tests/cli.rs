//! Exit codes and output layout of the `ss` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ss"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.conf");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn fit_succeeds_and_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "schedule.epochs = 20\nmlp.epochs = 20\n");
    let out = tmp.path().join("out");
    let res = ss(&["fit", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap(), "--jobs", "1"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(String::from_utf8_lossy(&res.stdout).trim(), out.display().to_string());
    for file in ["manifest.txt", "dataset.csv", "ss_train.csv", "fit_summary.csv", "mlp_train.csv"] {
        assert!(out.join(file).exists(), "{file}");
    }
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("run.seed = 5"));
    assert!(manifest.contains("run.jobs = 1"));
}

#[test]
fn shipped_entropy_config_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/entropy.conf");
    let res = ss(&["entropy", "--config", cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(tmp.path().join("entropy_summary.csv").exists());
    assert!(tmp.path().join("entropy_gamma10_k2.csv").exists());
}

#[test]
fn missing_config_exits_2() {
    let res = ss(&["fit", "--config", "/nonexistent/run.conf"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unknown_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "physics.temprature = 1\n");
    let res = ss(&["fit", "--config", &cfg, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn malformed_value_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sweep.k = log(1, 10)\n");
    let res = ss(&["scale-sweep", "--config", &cfg, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn singular_noise_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "physics.temperature = 0\n");
    let res = ss(&["entropy", "--config", &cfg, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn unstable_integration_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "physics.stiffness = 1e6\nphysics.friction = 0\nphysics.temperature = 0\nschedule.epochs = 400\nschedule.dt_epoch = 10\nschedule.inner_steps = 1\nmlp.enabled = false\n",
    );
    let res = ss(&["fit", "--config", &cfg, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let res = ss(&["train", "--config", "x"]);
    assert_eq!(res.status.code(), Some(2));
}
