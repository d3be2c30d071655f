// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{Model, ModelWeights};
use crate::container::{sha256_hex, Container};
use crate::error::{CloomError, Result};

pub const MODEL_KIND: &str = "model";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub seed: u64,
    pub final_loss: f32,
    /// Held-out accuracy per task name.
    pub accuracy: BTreeMap<String, f32>,
}

/// Model plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_container(&self) -> Result<Container> {
        let w = &self.model.weights;
        Ok(Container {
            kind: MODEL_KIND.into(),
            config: serde_json::to_value(&self.model.config)?,
            meta: serde_json::to_value(&self.meta)?,
            tensors: w.names().into_iter().zip(w.tensors().into_iter().cloned()).collect(),
        })
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(MODEL_KIND)?;
        let config: ModelConfig = serde_json::from_value(c.config.clone())?;
        config.validate()?;
        let meta: TrainingMeta = serde_json::from_value(c.meta.clone())?;
        let mut weights = ModelWeights::zeros(&config);
        let names = weights.names();
        for (name, slot) in names.iter().zip(weights.tensors_mut()) {
            let t = c.take(name)?;
            if t.shape() != slot.shape() {
                return Err(CloomError::ManifestMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?}, config implies {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t;
        }
        if let Some((extra, _)) = c.tensors.first() {
            return Err(CloomError::Format(format!("unexpected tensor `{extra}` in model container")));
        }
        Ok(Self {
            model: Model { config, weights },
            meta,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn save_checkpoint(ck: &ModelCheckpoint, path: &Path) -> Result<()> {
    ck.to_container()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_container(Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bit_identical() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            n_decoder_layers: 1,
            ..Default::default()
        };
        let ck = ModelCheckpoint {
            model: Model::new(cfg, 5).unwrap(),
            meta: TrainingMeta {
                steps: 3,
                seed: 5,
                final_loss: 1.5,
                accuracy: [("color".to_string(), 0.5)].into_iter().collect(),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.clm1");
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.hash().unwrap(), ck.hash().unwrap());
    }

    #[test]
    fn rejects_wrong_kind() {
        let c = Container {
            kind: "transcoder_bank".into(),
            config: serde_json::json!({}),
            meta: serde_json::json!({}),
            tensors: vec![],
        };
        assert!(ModelCheckpoint::from_container(c).is_err());
    }
}
