use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nsreg::graph::SynthConfig;
use nsreg::trainer::TrainConfig;
use nsreg_cli::{RunConfig, EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFICATION};

fn nsreg(dir: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nsreg"));
    cmd.current_dir(dir).env("RUST_LOG", "warn").env("NSREG_THREADS", "1");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config() -> RunConfig {
    RunConfig {
        synth: SynthConfig::small(120),
        train: TrainConfig {
            epochs: 3,
            n_labelled_anomalies: 3,
            labelled_normal_fraction: 0.2,
            ..TrainConfig::default()
        },
        seeds: 2,
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string(cfg).unwrap()).unwrap();
    path
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

#[test]
fn synth_is_byte_identical_for_equal_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    for dir in ["a", "b"] {
        let out = nsreg(tmp.path(), Some(&cfg), &["synth", "--seed", "7", "--out", dir]);
        assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for file in ["edges.txt", "features.csv", "labels.csv", "manifest.json"] {
        assert_eq!(read(&a, file), read(&b, file), "{file}");
    }
    let other = nsreg(tmp.path(), Some(&cfg), &["synth", "--seed", "8", "--out", "c"]);
    assert_eq!(code(&other), EXIT_OK);
    assert_ne!(read(&a, "edges.txt"), read(&tmp.path().join("c"), "edges.txt"));
}

#[test]
fn synthetic_files_train_like_the_generated_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    assert_eq!(code(&nsreg(tmp.path(), Some(&cfg), &["synth", "--out", "data", "--format", "binary"])), EXIT_OK);
    assert!(tmp.path().join("data/features.bin").exists());
    let from_files = nsreg(tmp.path(), Some(&cfg), &["train", "--data", "data", "--out", "f"]);
    assert_eq!(code(&from_files), EXIT_OK, "{}", String::from_utf8_lossy(&from_files.stderr));
    assert_eq!(code(&nsreg(tmp.path(), Some(&cfg), &["train", "--out", "g"])), EXIT_OK);
    let (f, g) = (tmp.path().join("f"), tmp.path().join("g"));
    assert_eq!(read(&f, "checkpoint.nsrc"), read(&g, "checkpoint.nsrc"));
}

#[test]
fn eval_twice_gives_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    assert_eq!(code(&nsreg(tmp.path(), Some(&cfg), &["train", "--out", "m"])), EXIT_OK);
    for dir in ["e1", "e2"] {
        let out = nsreg(tmp.path(), Some(&cfg), &["eval", "--checkpoint", "m/checkpoint.nsrc", "--out", dir]);
        assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (tmp.path().join("e1"), tmp.path().join("e2"));
    assert_eq!(read(&a, "report.json"), read(&b, "report.json"));
    assert_eq!(read(&a, "report.csv"), read(&b, "report.csv"));
}

#[test]
fn zero_epochs_writes_untrained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = nsreg(tmp.path(), Some(&cfg), &["train", "--epochs", "0", "--out", "z"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let losses = String::from_utf8(read(&tmp.path().join("z"), "losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1, "header only: {losses}");
    let eval = nsreg(tmp.path(), Some(&cfg), &["eval", "--checkpoint", "z/checkpoint.nsrc", "--out", "ez"]);
    assert_eq!(code(&eval), EXIT_OK);
}

#[test]
fn sweep_writes_one_row_per_alpha_rotation_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = nsreg(
        tmp.path(),
        Some(&cfg),
        &["sweep-alpha", "--alphas", "0.4,1.0", "--seeds", "2", "--epochs", "2", "--out", "s"],
    );
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(read(&tmp.path().join("s"), "sweep.csv")).unwrap();
    // 2 alphas x 2 rotations x 2 seeds, plus the header.
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2, "{csv}");
    assert!(tmp.path().join("s/sweep_summary.csv").exists());
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = nsreg(tmp.path(), Some(&path), &["train", "--out", "x"]);
    assert_eq!(code(&out), EXIT_CONFIG);
}

#[test]
fn invalid_hyperparameter_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = nsreg(tmp.path(), Some(&cfg), &["train", "--alpha", "1.5", "--out", "x"]);
    assert_eq!(code(&out), EXIT_CONFIG);
}

#[test]
fn missing_data_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nsreg(tmp.path(), None, &["train", "--data", "nowhere", "--out", "x"]);
    assert_eq!(code(&out), EXIT_DATA);
}

#[test]
fn malformed_edge_file_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    assert_eq!(code(&nsreg(tmp.path(), Some(&cfg), &["synth", "--out", "data"])), EXIT_OK);
    std::fs::write(tmp.path().join("data/edges.txt"), "0 1\n0 99999\n").unwrap();
    let out = nsreg(tmp.path(), Some(&cfg), &["train", "--data", "data", "--out", "x"]);
    assert_eq!(code(&out), EXIT_DATA);
    assert!(String::from_utf8_lossy(&out.stderr).contains("edges.txt:2:"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn checkpoint_on_graph_of_other_width_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    assert_eq!(code(&nsreg(tmp.path(), Some(&cfg), &["train", "--out", "m"])), EXIT_OK);
    let mut wide = small_config();
    wide.synth.feature_dim = 20;
    let wide_cfg = tmp.path().join("wide.json");
    std::fs::write(&wide_cfg, serde_json::to_string(&wide).unwrap()).unwrap();
    let out = nsreg(tmp.path(), Some(&wide_cfg), &["eval", "--checkpoint", "m/checkpoint.nsrc", "--out", "e"]);
    assert_eq!(code(&out), EXIT_DATA);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("16") && err.contains("20"), "{err}");
}

#[test]
fn corrupted_gradient_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nsreg(tmp.path(), None, &["gradcheck", "--nodes", "12", "--corrupt-gradient", "--out", "g"]);
    assert_eq!(code(&out), EXIT_VERIFICATION, "{}", String::from_utf8_lossy(&out.stdout));
    let clean = nsreg(tmp.path(), None, &["gradcheck", "--nodes", "12", "--out", "h"]);
    assert_eq!(code(&clean), EXIT_OK, "{}", String::from_utf8_lossy(&clean.stdout));
}

#[test]
fn gradcheck_refuses_large_graphs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nsreg(tmp.path(), None, &["gradcheck", "--nodes", "500", "--out", "g"]);
    assert_eq!(code(&out), EXIT_CONFIG);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = Command::new(env!("CARGO_BIN_EXE_nsreg"))
        .current_dir(tmp.path())
        .env("NSREG_THREADS", "zero")
        .args(["--config", cfg.to_str().unwrap(), "sweep-alpha", "--out", "s"])
        .output()
        .unwrap();
    assert_eq!(code(&out), EXIT_CONFIG);
}
