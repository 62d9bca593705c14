mod common;

use std::fs;

use common::{manifest, ok, outputs, pjfit, with, GENERATOR, MODEL};

#[test]
fn help_and_usage_errors_exit_with_expected_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(pjfit(d, &["--help"]).status.code(), Some(0));
    assert_eq!(pjfit(d, &["--version"]).status.code(), Some(0));
    assert_eq!(pjfit(d, &[]).status.code(), Some(1));
    assert_eq!(pjfit(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(pjfit(d, &["train", "--lambda", "abc"]).status.code(), Some(1));
    let out = pjfit(d, &["evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    assert_eq!(pjfit(d, &["evaluate", "--checkpoint", "missing.ckpt"]).status.code(), Some(1));
    assert_eq!(pjfit(d, &["gradcheck"]).status.code(), Some(1));
    assert_eq!(pjfit(d, &["train", "--data", "nowhere"]).status.code(), Some(1));
    fs::write(d.join("bad.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(pjfit(d, &["serve-sim", "--checkpoint", "bad.ckpt"]).status.code(), Some(1));
    // Out-of-range settings are validation errors.
    assert_eq!(pjfit(d, &["generate", "--out", "x", "--on-topic", "1.5"]).status.code(), Some(1));
}

#[test]
fn each_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in pjfit::cli::SUBCOMMANDS {
        let out = pjfit(dir.path(), &[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("[default:"), "{cmd}");
    }
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["generate", "--seed", "5", "--out", "a"], &[GENERATOR]));
    ok(d, &with(&["generate", "--seed", "5", "--out", "b"], &[GENERATOR]));
    ok(d, &with(&["generate", "--seed", "6", "--out", "c"], &[GENERATOR]));
    assert_eq!(outputs(&d.join("a")), outputs(&d.join("b")));
    assert_ne!(outputs(&d.join("a")), outputs(&d.join("c")));
    for name in ["vocab.txt", "candidates.txt", "jobs.txt", "interactions.txt"] {
        assert_eq!(fs::read(d.join("a").join(name)).unwrap(), fs::read(d.join("b").join(name)).unwrap());
    }
}

#[test]
fn data_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_pjfit"))
        .current_dir(dir.path())
        .env("PJFIT_DATA_ROOT", "envdata")
        .args(with(&["generate"], &[GENERATOR]))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("envdata/vocab.txt").exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["generate", "--seed", "1", "--out", "data"], &[GENERATOR]));
    fs::write(
        d.join("settings.toml"),
        "seed = 9\n[model]\nlambda = 0.3\nk = 3\n[train]\nmax_epochs = 3\nbatch_size = 16\n",
    )
    .unwrap();
    ok(
        d,
        &with(&["train", "--config", "settings.toml", "--out", "run", "--max-epochs", "1", "--k", "2"], &[&MODEL[2..]]),
    );
    let m = manifest(&d.join("run"));
    assert_eq!(m["seed"].as_integer(), Some(9));
    let cfg = m["config"].as_table().unwrap();
    assert_eq!(cfg["model"]["lambda"].as_float(), Some(0.3));
    assert_eq!(cfg["model"]["k"].as_integer(), Some(2));
    assert_eq!(cfg["train"]["max_epochs"].as_integer(), Some(1));
    assert_eq!(cfg["train"]["batch_size"].as_integer(), Some(16));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs_run"].as_u64(), Some(1), "{summary}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (i, text) in ["[model]\nlamda = 0.3\n", "[modle]\nlambda = 0.3\n", "[model\n"].iter().enumerate() {
        let path = format!("bad{i}.toml");
        fs::write(d.join(&path), text).unwrap();
        let out = pjfit(d, &["train", "--config", &path]);
        assert_eq!(out.status.code(), Some(1), "{text}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(&path));
    }
}

#[test]
fn a_run_manifest_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["generate", "--seed", "2", "--out", "data"], &[GENERATOR]));
    ok(d, &with(&["train", "--seed", "4", "--out", "first", "--max-epochs", "2", "--lambda", "0.4"], &[MODEL]));
    ok(d, &["train", "--config", "first/manifest.toml", "--out", "second"]);
    assert_eq!(outputs(&d.join("first")), outputs(&d.join("second")));
    assert_eq!(manifest(&d.join("first"))["config"], manifest(&d.join("second"))["config"]);
    ok(d, &["train", "--config", "first/manifest.toml", "--out", "third", "--seed", "5"]);
    assert_ne!(outputs(&d.join("first"))["model.ckpt"], outputs(&d.join("third"))["model.ckpt"]);
}
