use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::data::DatasetMeta;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Serialized parameters, tied to the dataset vocabulary they were built for.
///
/// Tensors appear in registration order, so two equal parameter sets always
/// serialize to the same bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub meta_fingerprint: String,
    pub model: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, meta: &DatasetMeta) -> Self {
        Self {
            meta_fingerprint: meta.fingerprint(),
            model: params.config.clone(),
            tensors: params
                .store
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds parameters; fails if `meta` differs from the training data's.
    pub fn to_params(&self, meta: &DatasetMeta) -> Result<ModelParams> {
        let fp = meta.fingerprint();
        if fp != self.meta_fingerprint {
            return Err(ModelError::Checkpoint(format!(
                "dataset metadata {fp} does not match checkpoint {}",
                self.meta_fingerprint
            )));
        }
        let mut params = ModelParams::init(self.model.clone(), meta, 0)?;
        if params.store.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.store.len(),
                self.tensors.len()
            )));
        }
        for nt in &self.tensors {
            let id = params
                .store
                .find(&nt.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {}", nt.name)))?;
            if params.store.get(id).shape() != nt.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    nt.name,
                    nt.shape,
                    params.store.get(id).shape()
                )));
            }
            params.store.set(id, &nt.values)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path.as_ref(), bytes)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_slice(&bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}
