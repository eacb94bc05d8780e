//! Binary checkpoint: `SGCK`, a `u16` version, a `u32` header length, a JSON
//! header, then every tensor as little-endian `f32` in table order.
//!
//! Parameters are trained in `f64` and stored as `f32`, so a reload matches
//! the saved model to single precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::TensorSpec;
use super::{ModelConfig, ModelError, PawaModel};
use crate::corpus::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
const CHECKPOINT_VERSION: u16 = 1;

/// Everything a checkpoint records besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Truncation depth the targets were built with.
    pub m: usize,
    /// Fingerprint of the tree the SemIds came from.
    pub tree_fingerprint: String,
    pub vocab: Vocab,
    pub train_seed: u64,
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PawaModel,
    pub meta: CheckpointMeta,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let params = self.model.params();
        let header = Header {
            config: self.model.config().clone(),
            meta: self.meta.clone(),
            tensors: params.specs.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(10 + json.len() + 4 * params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &v in &params.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json = bytes.get(10..10 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
        let mut model = PawaModel::uninitialized(header.config)?;
        if model.params().specs.len() != header.tensors.len()
            || model
                .params()
                .specs
                .iter()
                .zip(&header.tensors)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape || a.offset != b.offset)
        {
            return Err(corrupt("tensor table does not match the configuration"));
        }
        let body = &bytes[10 + hlen..];
        let n = model.num_params();
        if body.len() != 4 * n {
            return Err(corrupt(format!("expected {} weight bytes, found {}", 4 * n, body.len())));
        }
        for (dst, chunk) in model.params_mut().data.iter_mut().zip(body.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(corrupt("non-finite weight"));
            }
            *dst = v as f64;
        }
        Ok(Self {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
