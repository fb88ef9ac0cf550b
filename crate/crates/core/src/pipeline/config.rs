use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dataset::{Format, NegativePopularity};
use crate::model::{bytes_hash, ModelConfig};
use crate::pretrain::PretrainConfig;
use crate::tailinfer::InferenceConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub format: Format,
    pub min_actions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: PathBuf::from("interactions.csv"), format: Format::Csv, min_actions: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_negatives: usize,
    pub negative_popularity: NegativePopularity,
    /// List length for the popularity re-ranking baseline.
    pub rerank_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, n_negatives: 100, negative_popularity: NegativePopularity::Global, rerank_k: 10 }
    }
}

/// Everything a run needs, read from one JSON document. Missing keys take
/// their defaults; unknown keys are rejected. The top-level `seed` drives
/// model initialization, pre-training and inference training (the `seed`
/// fields of those sections are overwritten by it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub tau: f64,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            tau: 0.5,
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, PipelineError> {
        let mut cfg: Self = serde_json::from_slice(bytes).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.sync_seeds();
        Ok(cfg)
    }

    /// Read and validate a config file. Relative data and output paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&bytes).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data.path.is_relative() {
            cfg.data.path = base.join(&cfg.data.path);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync_seeds();
    }

    fn sync_seeds(&mut self) {
        self.pretrain.seed = self.seed;
        self.inference.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| Err(PipelineError::Config(m));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return cfg(format!("tau {} must lie in (0, 1)", self.tau));
        }
        if self.inference.kappa_max < 1 {
            return cfg("kappa_max must be at least 1".into());
        }
        if self.model.max_len < 2 {
            return cfg(format!("max_len {} must be at least 2", self.model.max_len));
        }
        if self.eval.n_negatives == 0 || self.eval.rerank_k == 0 {
            return cfg("n_negatives and rerank_k must be positive".into());
        }
        if self.data.min_actions < 3 {
            return cfg("min_actions below 3 leaves no training item after the split".into());
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.inference.validate(self.model.dim)?;
        Ok(())
    }

    /// Hash of the canonical serialization (paths excluded), used to name
    /// outputs.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("plain config");
        v.as_object_mut().expect("object").remove("out_dir");
        bytes_hash(&serde_json::to_vec(&v).expect("plain config"))
    }
}
