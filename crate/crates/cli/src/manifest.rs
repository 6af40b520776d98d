//! Run directory bookkeeping: every artifact is written and read through a
//! [`Workspace`], which records content hashes and a per-stage read log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub stage: String,
    pub written_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub started_at: u64,
    pub finished_at: u64,
    /// Artifact keys read during the stage, in order.
    pub reads: Vec<String>,
    pub writes: Vec<String>,
    pub deleted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    /// SHA-256 of the resolved config text stored as the `config` artifact.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub data_free: bool,
    /// Keyed by logical artifact name.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    /// Latest record of each stage, in first-run order.
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(seed: u64, data_free: bool) -> Self {
        Self {
            software_version: SOFTWARE_VERSION.to_string(),
            config_hash: String::new(),
            seeds: vec![seed],
            data_free,
            artifacts: BTreeMap::new(),
            stages: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Artifact(format!("cannot read {}: {e}; run base-train first", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Artifact(format!("malformed manifest {}: {e}", path.display())))?;
        if m.software_version != SOFTWARE_VERSION {
            return Err(CliError::Artifact(format!(
                "manifest written by version {}, this is {SOFTWARE_VERSION}",
                m.software_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(niff_core::NiffError::from)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Checks that every recorded artifact exists with its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        for (key, rec) in &self.artifacts {
            check(dir, key, rec)?;
        }
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

fn check(dir: &Path, key: &str, rec: &ArtifactRecord) -> Result<Vec<u8>, CliError> {
    let path = dir.join(&rec.path);
    let bytes = fs::read(&path).map_err(|e| CliError::Artifact(format!("artifact `{key}` ({}): {e}", path.display())))?;
    let found = sha256_hex(&bytes);
    if found != rec.sha256 {
        return Err(CliError::Artifact(format!(
            "artifact `{key}` ({}) does not match its recorded hash",
            path.display()
        )));
    }
    Ok(bytes)
}

/// A run directory with its manifest and the record of the stage in progress.
pub struct Workspace {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    current: StageRecord,
}

impl Workspace {
    /// Starts a fresh run, replacing any existing manifest.
    pub fn create(dir: &Path, manifest: RunManifest, stage: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            current: StageRecord::start(stage),
        })
    }

    pub fn open(dir: &Path, stage: &str) -> Result<Self, CliError> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest::load(dir)?,
            current: StageRecord::start(stage),
        })
    }

    /// Closes the current stage and starts another in the same directory.
    pub fn next_stage(&mut self, stage: &str) -> Result<(), CliError> {
        self.finish()?;
        self.current = StageRecord::start(stage);
        Ok(())
    }

    /// Reads a recorded artifact, verifying its hash and logging the read.
    pub fn read(&mut self, key: &str) -> Result<Vec<u8>, CliError> {
        let rec = self
            .manifest
            .artifacts
            .get(key)
            .ok_or_else(|| CliError::Artifact(format!("artifact `{key}` is not recorded in the manifest")))?;
        let bytes = check(&self.dir, key, rec)?;
        self.current.reads.push(key.to_string());
        Ok(bytes)
    }

    pub fn write(&mut self, key: &str, file: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(file), bytes)?;
        self.manifest.artifacts.insert(
            key.to_string(),
            ArtifactRecord {
                path: file.to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
                stage: self.current.stage.clone(),
                written_at: now(),
            },
        );
        self.current.writes.push(key.to_string());
        Ok(())
    }

    /// Removes an artifact from disk and from the manifest.
    pub fn delete(&mut self, key: &str) -> Result<(), CliError> {
        if let Some(rec) = self.manifest.artifacts.remove(key) {
            fs::remove_file(self.dir.join(&rec.path))?;
            self.current.deleted.push(key.to_string());
        }
        Ok(())
    }

    pub fn finish(&mut self) -> Result<(), CliError> {
        self.current.finished_at = now();
        let rec = self.current.clone();
        match self.manifest.stages.iter_mut().find(|s| s.stage == rec.stage) {
            Some(slot) => *slot = rec,
            None => self.manifest.stages.push(rec),
        }
        self.manifest.save(&self.dir)
    }
}

impl StageRecord {
    fn start(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            started_at: now(),
            finished_at: 0,
            reads: Vec::new(),
            writes: Vec::new(),
            deleted: Vec::new(),
        }
    }
}
