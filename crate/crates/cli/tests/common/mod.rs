#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub struct Run {
    pub code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Run {
            code: o.status.code(),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

pub fn mega(args: &[&str]) -> Run {
    Command::new(env!("CARGO_BIN_EXE_mega"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
        .into()
}

/// Writes `run.toml` into `dir` with the given lines plus an `out_dir`
/// inside `dir`, and returns its path.
pub fn write_config(dir: &Path, lines: &[String]) -> PathBuf {
    let mut text = format!("out_dir = {:?}\n", dir.join("out").to_str().unwrap());
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn path_line(key: &str, p: &Path) -> String {
    format!("{key} = {:?}", p.to_str().unwrap())
}

/// Value following `key ` on the first stdout line that starts with it.
pub fn field(stdout: &str, key: &str) -> Option<String> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .map(|r| r.split_whitespace().next().unwrap_or("").to_string())
}

#[derive(Debug, serde::Deserialize)]
pub struct Record {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub macro_f1: f64,
}

pub fn read_metrics(path: &Path) -> Vec<Record> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
