//! Helpers shared by the CLI test targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const TRAIN: &str = "synth:separation=2.5,seed=100";
pub const TEST: &str = "synth:separation=2.5,seed=100,per_class=2000,split=test";

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geoward"))
}

/// Runs `geoward` with the given arguments, returning its output.
pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn geoward")
}

/// Runs and asserts success, showing stderr on failure.
pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "geoward {:?} failed ({:?}): {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .expect("valid json")
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

/// Asserts `file` validates against `schemas/<name>.schema.json`.
pub fn assert_schema(name: &str, file: &Path) {
    let schema = read_json(&schema_dir().join(format!("{name}.schema.json")));
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let doc = read_json(file);
    let errors: Vec<String> = validator
        .iter_errors(&doc)
        .map(|e| format!("{e} at {}", e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{} violates {name}: {errors:?}", file.display());
}

/// Parses a CSV with a header into (header, rows of fields).
pub fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    let mut lines = text.lines();
    let header = lines.next().expect("header").split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

pub fn column(p: &Path, name: &str) -> Vec<f64> {
    let (h, rows) = read_csv(p);
    let i = h
        .iter()
        .position(|c| c == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().expect("number")).collect()
}

/// Trains the 2-16-3 reference network into `dir`.
pub fn train_reference(dir: &Path, seed: u64) -> PathBuf {
    let seed = seed.to_string();
    let train = format!("synth:separation=2.5,seed={}", 100 + seed.parse::<u64>().unwrap());
    ok(&[
        "train",
        "--data",
        &train,
        "--arch",
        "2-16-3",
        "--seed",
        &seed,
        "--out",
        s(dir),
    ]);
    dir.join("checkpoint.json")
}
