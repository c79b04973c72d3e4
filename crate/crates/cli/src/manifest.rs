//! Reproducibility ledger written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use neuroseg::volio::Volume;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Digest of a volume's voxel values as little-endian f64.
pub fn volume_digest(v: &Volume) -> String {
    let mut h = Sha256::new();
    for x in v.data() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// One applied operation, its parameters and the digest of its result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operation {
    pub name: String,
    pub params: Value,
    pub digest: String,
}

impl Operation {
    pub fn new(name: &str, params: Value, result: &Volume) -> Self {
        Operation { name: name.into(), params, digest: volume_digest(result) }
    }
}

/// A written file, relative to the output directory, with its digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub id: String,
    pub sources: Vec<PathBuf>,
    pub operations: Vec<Operation>,
    pub transform: Option<PathBuf>,
    pub outputs: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Effective configuration, after overrides.
    pub config: Value,
    /// Sorted by id.
    pub volumes: Vec<VolumeRecord>,
    /// Files not tied to a single volume.
    pub outputs: Vec<FileRecord>,
    pub failures: Vec<Failure>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Manifest {
            command: command.into(),
            seed,
            config,
            volumes: Vec::new(),
            outputs: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }

    /// Sort records, then write `manifest_<command>.json` under `out`.
    pub fn write(&mut self, out: &Path) -> Result<PathBuf, CliError> {
        self.volumes.sort_by(|a, b| a.id.cmp(&b.id));
        self.failures.sort_by(|a, b| a.id.cmp(&b.id));
        let path = out.join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn files(&self) -> impl Iterator<Item = &FileRecord> {
        self.volumes.iter().flat_map(|v| &v.outputs).chain(&self.outputs)
    }

    /// Files under `out` whose content no longer matches the recorded digest.
    pub fn verify(&self, out: &Path) -> Vec<PathBuf> {
        self.files()
            .filter(|f| sha256_file(&out.join(&f.path)).ok().as_deref() != Some(f.sha256.as_str()))
            .map(|f| f.path.clone())
            .collect()
    }
}

/// Record a file written below `out`.
pub fn record(out: &Path, path: &Path) -> Result<FileRecord, CliError> {
    let rel = path.strip_prefix(out).unwrap_or(path).to_path_buf();
    Ok(FileRecord { path: rel, sha256: sha256_file(path)? })
}
