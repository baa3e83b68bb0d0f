#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clap::Parser;
use epigraph_cli::config::FileConfig;
use epigraph_cli::{run, Cli, Result};

pub fn cli(args: &[&str]) -> Result<()> {
    let mut full = vec!["epigraph"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full).expect("flags parse"))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn no_config() -> FileConfig {
    FileConfig::default()
}

/// Synthetic data plus a briefly trained checkpoint.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub run: PathBuf,
}

impl Fixture {
    pub fn new(regions: usize, days: usize, window: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        cli(&["synth", "--out", s(&data), "--regions", &regions.to_string(), "--days", &days.to_string(), "--seed", "5"]).unwrap();
        cli(&[
            "train", "--data", s(&data), "--out", s(&run), "--epochs", "3", "--window", &window.to_string(), "--seed", "1",
        ])
        .unwrap();
        Fixture { dir, data, run }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.run.join("model.ckpt")
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    read(path).lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}
