//! Run manifests, artifact bookkeeping and replay verification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub key: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// File name inside the output directory.
    pub name: String,
    pub sha256: String,
    /// Timing tables are not expected to reproduce; everything else is.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Every setting the command read, in resolved form.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    /// Root seed and every child seed derived from it, by label.
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: malformed manifest: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::usage(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// Checks that every input file still has its recorded digest.
    pub fn verify_inputs(&self) -> Result<(), CliError> {
        for input in &self.inputs {
            let bytes = fs::read(&input.path).map_err(|e| CliError::usage(format!("input `{}` ({}): {e}", input.key, input.path)))?;
            if sha256_hex(&bytes) != input.sha256 {
                return Err(CliError::usage(format!("input `{}` ({}) changed since the recorded run", input.key, input.path)));
            }
        }
        Ok(())
    }
}

/// Per-artifact outcome of a replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayStatus {
    Identical,
    Differs,
    Missing,
    /// Timing artifact; not compared.
    Skipped,
}

impl ReplayStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReplayStatus::Identical => "identical",
            ReplayStatus::Differs => "differs",
            ReplayStatus::Missing => "missing",
            ReplayStatus::Skipped => "skipped",
        }
    }
}

pub fn compare(original: &RunManifest, replayed: &RunManifest) -> Vec<(String, ReplayStatus)> {
    let fresh: BTreeMap<&str, &Artifact> = replayed.artifacts.iter().map(|a| (a.name.as_str(), a)).collect();
    original
        .artifacts
        .iter()
        .map(|a| {
            let status = if !a.deterministic {
                ReplayStatus::Skipped
            } else {
                match fresh.get(a.name.as_str()) {
                    None => ReplayStatus::Missing,
                    Some(b) if b.sha256 == a.sha256 => ReplayStatus::Identical,
                    Some(_) => ReplayStatus::Differs,
                }
            };
            (a.name.clone(), status)
        })
        .collect()
}

/// Collects artifacts and input digests for one run.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
    inputs: Vec<InputDigest>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn record_input(&mut self, key: &str, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(InputDigest {
            key: key.to_string(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn store(&mut self, name: &str, bytes: Vec<u8>, deterministic: bool) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.push(Artifact {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
            deterministic,
        });
        Ok(path)
    }

    /// Renders an artifact in memory, then writes and digests it.
    pub fn write(
        &mut self,
        name: &str,
        render: impl FnOnce(&mut Vec<u8>) -> fastinf::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.store(name, buf, true)
    }

    pub fn write_timing(
        &mut self,
        name: &str,
        render: impl FnOnce(&mut Vec<u8>) -> fastinf::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.store(name, buf, false)
    }

    pub fn finish(
        self,
        command: &str,
        config: BTreeMap<String, String>,
        seeds: BTreeMap<String, u64>,
        wall_time_s: f64,
    ) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: self.inputs,
            seeds,
            artifacts: self.artifacts,
            wall_time_s,
        };
        manifest.save(&self.dir)?;
        Ok(manifest)
    }
}
