//! `manifest.json`, written next to the artifacts of every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the work directory when it lies inside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_digest: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    work: PathBuf,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, work: &Path, cfg: &RunConfig) -> Result<Self, CliError> {
        let mut seeds = BTreeMap::new();
        seeds.insert("root".to_owned(), cfg.root_seed()?);
        Ok(Self {
            work: work.to_path_buf(),
            manifest: RunManifest {
                command: command.to_owned(),
                tool_version: env!("CARGO_PKG_VERSION").to_owned(),
                config_digest: cfg.digest(),
                config: cfg.values().clone(),
                seeds,
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_owned(), value);
    }

    fn artifact(&self, path: &Path) -> Result<Artifact, CliError> {
        let shown = path.strip_prefix(&self.work).unwrap_or(path);
        Ok(Artifact { path: shown.to_string_lossy().replace('\\', "/"), sha256: file_digest(path)? })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let a = self.artifact(path)?;
        if !self.manifest.inputs.contains(&a) {
            self.manifest.inputs.push(a);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let a = self.artifact(path)?;
        self.manifest.outputs.push(a);
        Ok(())
    }

    /// Writes the manifest into `dir`, which holds the outputs.
    pub fn finish(self, dir: &Path) -> Result<RunManifest, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        std::fs::read_to_string(&path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
