use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, RecModel};
use crate::numerics::ParamSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Recommender,
    Inference,
}

/// JSON container for a parameter set. `f64` values round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub catalog_hash: String,
    pub n_items: usize,
    pub model: ModelConfig,
    /// Hash of the recommender checkpoint this one was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
    /// Free-form settings of the producing stage.
    #[serde(default)]
    pub settings: serde_json::Value,
    pub params: ParamSet,
}

fn io(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint(format!("{}: {e}", path.display()))
}

impl Checkpoint {
    pub fn from_model(model: &RecModel, catalog_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Recommender,
            catalog_hash: catalog_hash.to_string(),
            n_items: model.n_items(),
            model: model.config().clone(),
            source_hash: None,
            settings: serde_json::Value::Null,
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        serde_json::to_vec(self).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format version {}", ck.format_version)));
        }
        Ok(ck)
    }

    /// Write atomically (temp file then rename).
    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io(path, e))?;
        Ok(bytes_hash(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn verify_catalog(&self, catalog_hash: &str) -> Result<(), ModelError> {
        if self.catalog_hash != catalog_hash {
            return Err(ModelError::CatalogMismatch {
                expected: self.catalog_hash.clone(),
                found: catalog_hash.to_string(),
            });
        }
        Ok(())
    }

    /// Rebuild the recommender after checking the catalog it belongs to.
    pub fn into_model(self, catalog_hash: &str) -> Result<RecModel, ModelError> {
        if self.kind != CheckpointKind::Recommender {
            return Err(ModelError::Checkpoint("not a recommender checkpoint".into()));
        }
        self.verify_catalog(catalog_hash)?;
        RecModel::from_params(self.model, self.n_items, self.params)
    }
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// sha256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String, ModelError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(bytes_hash(&bytes))
}
