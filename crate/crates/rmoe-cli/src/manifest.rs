//! Run manifests: every run directory gets exactly one `run.json` recording
//! the command, resolved configuration, seed, input file hashes, artifact
//! paths, and timestamps. Primary artifacts are byte-reproducible; the
//! manifest (timestamps) is not.

use crate::{runtime, usage, CliError};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub timestamp_unix: u64,
    pub git_describe: String,
}

/// FNV-1a over a file's bytes, as a 16-digit hex string.
pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| runtime(format!("cannot hash {}: {e}", path.display())))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    Ok(format!("{h:016x}"))
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Create the run directory, refusing to reuse one that already holds a
/// manifest (one manifest per run directory, append-only).
pub fn prepare_run_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    if out.join("run.json").exists() {
        return Err(usage(format!(
            "{} already contains run.json; each run needs its own directory",
            out.display()
        )));
    }
    Ok(())
}

pub struct ManifestBuilder {
    command: String,
    config: BTreeMap<String, String>,
    seed: u64,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: BTreeMap::new(),
            seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn config(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn artifact(mut self, path: &Path) -> Self {
        self.artifacts.push(path.to_path_buf());
        self
    }

    pub fn write(self, out_dir: &Path) -> Result<(), CliError> {
        let mut input_hashes = BTreeMap::new();
        for p in &self.inputs {
            input_hashes.insert(p.display().to_string(), file_hash(p)?);
        }
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            input_hashes,
            artifacts: self
                .artifacts
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            git_describe: git_describe(),
        };
        let path = out_dir.join("run.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }
}
