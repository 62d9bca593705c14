#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub const GENERATOR: &[&str] = &[
    "--users", "100", "--jobs", "200", "--positives", "400", "--categories", "8", "--vocab-size", "120",
];

pub const MODEL: &[&str] = &[
    "--k", "2", "--d-j", "4", "--d-w", "8", "--heads", "1", "--encoder-layers", "1", "--encoder-heads", "2",
    "--encoder-ff-width", "8", "--encoder-max-tokens", "16", "--intention-hidden", "8", "--d-o", "4",
    "--prediction-hidden", "8", "--l-max", "16",
];

/// Runs the binary in `cwd` with no inherited data-root override.
pub fn pjfit(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pjfit"))
        .current_dir(cwd)
        .env_remove("PJFIT_DATA_ROOT")
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("spawn pjfit")
}

pub fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = pjfit(cwd, args);
    assert!(
        out.status.success(),
        "pjfit {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn with<'a>(base: &[&'a str], extra: &[&'a [&'a str]]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    for e in extra {
        v.extend_from_slice(e);
    }
    v
}

pub fn manifest(run_dir: &Path) -> toml::Table {
    toml::from_str(&std::fs::read_to_string(run_dir.join("manifest.toml")).unwrap()).unwrap()
}

/// Output path to SHA-256 as recorded in a run manifest.
pub fn outputs(run_dir: &Path) -> BTreeMap<String, String> {
    manifest(run_dir)["outputs"]
        .as_table()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().unwrap().to_string()))
        .collect()
}
