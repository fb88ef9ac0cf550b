//! File-based orchestration of the phases behind the command-line tool.
//!
//! A run directory holds the ingested store, every checkpoint and report,
//! and `manifest.json`, which records each artifact's hash and parents.
//! Artifact names embed a hash of everything they depend on, so rerunning a
//! command with the same inputs rewrites identical bytes.

mod commands;
mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Catalog, DataError, DatasetStats, LeaveOneOutSplit};
use crate::eval::EvalError;
use crate::model::{bytes_hash, ModelError};
use crate::pretrain::PretrainError;
use crate::tailinfer::InferError;

pub use commands::{
    apply_eval, baseline, export_embeddings, format_stats, ingest, load_store, new_item, pretrain, sweep, train_inference,
    ApplyOutcome, BaselineKind, NewItemFile, NewItemOutcome, NewItemSpec, PretrainOutcome, SweepParam,
    TrainOutcome, WindowSpec,
};
pub use config::{DataConfig, EvalConfig, PipelineConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("lineage mismatch: {0}")]
    Lineage(String),
    #[error("cannot access {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("run directory {0} is locked by another command")]
    Busy(String),
    #[error("training failed: {0}")]
    Training(String),
}

impl PipelineError {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::Lineage(_) | PipelineError::Io { .. } | PipelineError::Busy(_) => 3,
            PipelineError::Training(_) => 4,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io { path: path.display().to_string(), reason: e.to_string() }
    }
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Parameter(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => PipelineError::Config(m),
            ModelError::Numeric(n) => PipelineError::Training(n.to_string()),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => d.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Input(m) => PipelineError::Data(m),
        }
    }
}

impl From<PretrainError> for PipelineError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::Config(m) => PipelineError::Config(m),
            PretrainError::Model(m) => m.into(),
            PretrainError::Eval(m) => m.into(),
            d @ PretrainError::Divergence { .. } => PipelineError::Training(d.to_string()),
        }
    }
}

impl From<InferError> for PipelineError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Config(m) => PipelineError::Config(m),
            InferError::Training(m) => PipelineError::Training(m),
            InferError::Model(m) => m.into(),
            InferError::Data(d) => d.into(),
            InferError::Context(m) => PipelineError::Data(m),
        }
    }
}

/// Ingested corpus: the catalog with popularity counts and the
/// leave-one-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Store {
    pub dataset_hash: String,
    pub source: String,
    pub min_actions: usize,
    pub stats: DatasetStats,
    pub catalog: Catalog,
    pub split: LeaveOneOutSplit,
}

impl Store {
    pub fn new(source: String, min_actions: usize, stats: DatasetStats, catalog: Catalog, split: LeaveOneOutSplit) -> Self {
        let body = serde_json::to_vec(&(&catalog, &split)).expect("plain data");
        Self { dataset_hash: bytes_hash(&body), source, min_actions, stats, catalog, split }
    }
}

/// One output file and the hashes of the artifacts it was made from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub kind: String,
    pub path: String,
    pub sha256: String,
    pub parents: Vec<String>,
    pub created_unix: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub artifacts: Vec<ArtifactRecord>,
}

/// Exclusive handle on a run directory; the lock file is removed on drop.
pub struct Workspace {
    dir: PathBuf,
    lock: PathBuf,
}

impl Workspace {
    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let lock = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(PipelineError::Busy(dir.display().to_string()))
            }
            Err(e) => return Err(PipelineError::io(&lock, e)),
        }
        Ok(Self { dir: dir.to_path_buf(), lock })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest(&self) -> Result<RunManifest, PipelineError> {
        let p = self.path("manifest.json");
        if !p.exists() {
            return Ok(RunManifest::default());
        }
        let bytes = fs::read(&p).map_err(|e| PipelineError::io(&p, e))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))
    }

    /// Most recent artifact of `kind`.
    pub fn latest(&self, kind: &str) -> Result<Option<PathBuf>, PipelineError> {
        Ok(self.manifest()?.artifacts.iter().rev().find(|a| a.kind == kind).map(|a| self.dir.join(&a.path)))
    }

    /// Write `bytes` atomically and record the artifact.
    pub(crate) fn emit(
        &self,
        cfg: &PipelineConfig,
        kind: &str,
        name: &str,
        bytes: &[u8],
        parents: &[String],
    ) -> Result<(PathBuf, String), PipelineError> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        let sha = bytes_hash(bytes);
        let mut m = self.manifest()?;
        m.config_hash = cfg.hash();
        m.seed = cfg.seed;
        m.artifacts.retain(|a| a.path != name);
        m.artifacts.push(ArtifactRecord {
            kind: kind.to_string(),
            path: name.to_string(),
            sha256: sha.clone(),
            parents: parents.to_vec(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        });
        let mp = self.path("manifest.json");
        write_atomic(&mp, &to_json(&m))?;
        Ok((path, sha))
    }
}

impl Workspace {
    pub(crate) fn set_dataset_hash(&self, hash: &str) -> Result<(), PipelineError> {
        let mut m = self.manifest()?;
        m.dataset_hash = Some(hash.to_string());
        write_atomic(&self.path("manifest.json"), &to_json(&m))
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// First twelve hex digits of the hash of `parts`, for file names.
pub(crate) fn short_key(parts: &[&str]) -> String {
    bytes_hash(parts.join("\u{1f}").as_bytes())[..12].to_string()
}

#[cfg(test)]
mod tests;
