//! End-to-end checks of the binary: exit codes, file outputs, and
//! rerun-stability of the pipeline on a small corpus.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparql-nmt"))
}

fn data(name: &str) -> String {
    format!("{}/../../data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn prepare(dir: &Path, entries: &str) -> Output {
    run(&[
        "prepare",
        "--templates",
        &data("templates.tsv"),
        "--kb",
        &data("kb.txt"),
        "--out",
        dir.to_str().unwrap(),
        "--entries",
        entries,
        "--holdout",
        &data("holdout.txt"),
    ])
}

#[test]
fn help_succeeds() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(prepare(dir.path(), "40").status.code(), Some(0));
    let cfg = dir.path().join("model.cfg");
    std::fs::write(&cfg, "bogus_key = 3\n").unwrap();
    let out = run(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_key"), "names the bad key: {stderr}");
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "evaluate",
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--out",
        dir.path().to_str().unwrap(),
        "--kb",
        &data("kb.txt"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fractions_that_do_not_sum_to_one_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.args([
        "prepare",
        "--templates",
        &data("templates.tsv"),
        "--kb",
        &data("kb.txt"),
        "--out",
        dir.path().to_str().unwrap(),
        "--entries",
        "40",
        "--train-frac",
        "0.9",
        "--valid-frac",
        "0.3",
    ]);
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

/// Pulls every `train_loss` value out of a training run's stdout.
fn losses(stdout: &[u8]) -> Vec<f64> {
    String::from_utf8_lossy(stdout)
        .lines()
        .filter_map(|l| l.split("train_loss ").nth(1))
        .map(|v| v.trim().parse().unwrap())
        .collect()
}

#[test]
fn resuming_continues_the_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap().to_string();
    assert_eq!(prepare(dir.path(), "60").status.code(), Some(0));
    let cfg = dir.path().join("model.cfg");
    std::fs::write(&cfg, "layers = 1\nmodel_dim = 16\nheads = 2\nffn_dim = 32\n").unwrap();
    let first = run(&[
        "train",
        "--out",
        &out_dir,
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "8",
    ]);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let fresh = losses(&first.stdout);
    let resumed_out = run(&[
        "train",
        "--out",
        &out_dir,
        "--resume",
        dir.path().join("model.ckpt").to_str().unwrap(),
        "--checkpoint",
        dir.path().join("resumed.ckpt").to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_eq!(resumed_out.status.code(), Some(0), "{}", String::from_utf8_lossy(&resumed_out.stderr));
    let resumed = losses(&resumed_out.stdout);
    assert_eq!(resumed.len(), 1);
    // A continuation picks up near the last pre-resume loss instead of
    // restarting from a fresh model's initial loss.
    let last = *fresh.last().unwrap();
    assert!(
        resumed[0] < last * 1.2 + 0.1 && resumed[0] < fresh[0] * 0.9,
        "resumed epoch loss {} vs fresh first {} and last {last}",
        resumed[0],
        fresh[0]
    );
    assert!(dir.path().join("resumed.vocab").exists());
}

#[test]
fn resume_conflicts_with_config_flags() {
    let out = run(&["train", "--out", "/tmp", "--resume", "/tmp/x.ckpt", "--baseline"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corpus_too_small_to_split_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = prepare(dir.path(), "6");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_produces_the_expected_files_and_is_rerun_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap().to_string();
    assert_eq!(prepare(dir.path(), "60").status.code(), Some(0));
    let oov = run(&[
        "oov-gen",
        "--templates",
        &data("templates.tsv"),
        "--kb",
        &data("kb.txt"),
        "--out",
        &out_dir,
        "--oov",
        "10",
    ]);
    assert_eq!(oov.status.code(), Some(0));
    let cfg = dir.path().join("model.cfg");
    std::fs::write(&cfg, "layers = 1\nmodel_dim = 16\nheads = 2\nffn_dim = 32\ndropout = 0.1\n").unwrap();
    let train = run(&[
        "train",
        "--out",
        &out_dir,
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "2",
    ]);
    assert_eq!(train.status.code(), Some(0), "{}", String::from_utf8_lossy(&train.stderr));
    let eval = run(&[
        "evaluate",
        "--checkpoint",
        dir.path().join("model.ckpt").to_str().unwrap(),
        "--out",
        &out_dir,
        "--kb",
        &data("kb.txt"),
    ]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    for name in ["train.tsv", "valid.tsv", "test.tsv", "oov.tsv", "model.ckpt", "model.vocab", "report.txt"] {
        assert!(dir.path().join(name).exists(), "{name} written");
    }

    // A second identical run reproduces every artifact byte for byte.
    let dir2 = tempfile::tempdir().unwrap();
    let out2 = dir2.path().to_str().unwrap().to_string();
    assert_eq!(prepare(dir2.path(), "60").status.code(), Some(0));
    let cfg2 = dir2.path().join("model.cfg");
    std::fs::write(&cfg2, std::fs::read(&cfg).unwrap()).unwrap();
    run(&["train", "--out", &out2, "--config", cfg2.to_str().unwrap(), "--epochs", "2"]);
    run(&[
        "evaluate",
        "--checkpoint",
        dir2.path().join("model.ckpt").to_str().unwrap(),
        "--out",
        &out2,
        "--kb",
        &data("kb.txt"),
    ]);
    for name in ["train.tsv", "test.tsv", "model.ckpt", "report.txt"] {
        let a = std::fs::read(dir.path().join(name)).unwrap();
        let b = std::fs::read(dir2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} is rerun-stable");
    }
}
