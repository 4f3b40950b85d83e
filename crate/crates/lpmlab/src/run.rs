//! Run directories and run manifests.

use crate::formats::write_file;
use anyhow::Result;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const RUNS_DIR_ENV: &str = "LPMLAB_RUNS_DIR";

/// `$LPMLAB_RUNS_DIR` if set, else `runs` in the working directory.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<config-hash>-<seed>`.
pub fn run_dir(root: &Path, config_hash: &str, seed: u64) -> PathBuf {
    root.join(format!("{config_hash}-{seed}"))
}

pub fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub data_hash: String,
    pub seed: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub started: u64,
    pub finished: u64,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "data_hash = {}", self.data_hash);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "artifacts = {}", self.artifacts.join(" "));
        let _ = writeln!(out, "started = {}", self.started);
        let _ = writeln!(out, "finished = {}", self.finished);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv: std::collections::BTreeMap<String, String> =
            crate::config::parse_key_values(text)?.into_iter().collect();
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| anyhow::anyhow!("run manifest lacks `{k}`"))
        };
        Ok(RunManifest {
            command: get("command")?,
            config_hash: get("config_hash")?,
            data_hash: get("data_hash")?,
            seed: get("seed")?.parse()?,
            artifacts: get("artifacts")?.split_whitespace().map(String::from).collect(),
            started: get("started")?.parse()?,
            finished: get("finished")?.parse()?,
        })
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        write_file(&run_dir.join("manifest.txt"), self.to_text())
    }
}
