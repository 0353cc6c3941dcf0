use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub run_id: String,
    pub seed: u64,
    /// per-stage checkpoints, relative to the output directory
    pub checkpoints: Vec<String>,
}

/// Reproducibility record written next to every experiment's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<ManifestRun>,
    pub metrics_csv: String,
    /// relative path → SHA-256 of every artifact
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

impl RunManifest {
    pub fn new(config_hash: String, seeds: Vec<u64>, metrics_csv: &str) -> Self {
        RunManifest {
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seeds,
            runs: Vec::new(),
            metrics_csv: metrics_csv.to_string(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn add_run(&mut self, root: &Path, run_id: &str, seed: u64, checkpoints: &[PathBuf]) {
        self.runs.push(ManifestRun {
            run_id: run_id.to_string(),
            seed,
            checkpoints: checkpoints.iter().map(|p| relative(root, p)).collect(),
        });
    }

    /// Hashes `path` and records it under its path relative to `root`.
    pub fn record(&mut self, root: &Path, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.artifacts.insert(relative(root, path), hash);
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Outcome of re-hashing a manifest's artifacts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
    /// checkpoints or the metrics file referenced but not hashed
    pub unlisted: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty() && self.unlisted.is_empty()
    }
}

/// Re-hashes every artifact listed in the manifest at `path`.
pub fn verify(path: &Path) -> Result<VerifyReport> {
    let manifest = RunManifest::read(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut report = VerifyReport::default();
    for (rel, want) in &manifest.artifacts {
        let file = root.join(rel);
        if !file.exists() {
            report.missing.push(rel.clone());
            continue;
        }
        report.checked += 1;
        if &sha256_file(&file)? != want {
            report.mismatched.push(rel.clone());
        }
    }
    let referenced = manifest
        .runs
        .iter()
        .flat_map(|r| r.checkpoints.iter())
        .chain(std::iter::once(&manifest.metrics_csv));
    for rel in referenced {
        if !manifest.artifacts.contains_key(rel) {
            report.unlisted.push(rel.clone());
        }
    }
    Ok(report)
}
