//! Binary checkpoint format.
//!
//! ```text
//! "BQAC" | version u32 LE | manifest length u32 LE | manifest JSON | tensor data
//! ```
//!
//! The manifest lists every tensor in lexicographic name order together with
//! its shape and storage type. Tensor data follows in the same order as
//! little-endian floats. A tensor is stored as `f32` when every value
//! converts to `f32` without loss, otherwise as `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Model, ModelConfig, ModelError, ModelKind};
use crate::tensor::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 4] = b"BQAC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("tensor {name}: manifest needs {needed} bytes but only {available} remain")]
    Length {
        name: String,
        needed: usize,
        available: usize,
    },
    #[error("{0} unexpected bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("checkpoint does not match its architecture: {0}")]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn for_values(values: &[f64]) -> Dtype {
        if values.iter().all(|&v| (v as f32) as f64 == v || v.is_nan()) {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    model_kind: ModelKind,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a model, detached from its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            kind: model.kind(),
            config: model.config().clone(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<Model, CheckpointError> {
        Ok(Model::from_parts(self.kind, self.config, self.params)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut data = Vec::new();
        for (name, t) in self.params.iter() {
            let dtype = Dtype::for_values(t.data());
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype,
            });
            for &v in t.data() {
                match dtype {
                    Dtype::F32 => data.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => data.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let manifest = Manifest {
            model_kind: self.kind,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated("missing header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated("missing header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() < manifest_len {
            return Err(CheckpointError::Truncated(format!(
                "manifest needs {manifest_len} bytes, {} present",
                body.len()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..manifest_len])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;

        let mut rest = &body[manifest_len..];
        let mut params = ParameterSet::new();
        for entry in &manifest.tensors {
            let numel: usize = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Manifest(format!("{}: shape overflows", entry.name)))?;
            let needed = numel
                .checked_mul(entry.dtype.width())
                .ok_or_else(|| CheckpointError::Manifest(format!("{}: shape overflows", entry.name)))?;
            if rest.len() < needed {
                return Err(CheckpointError::Length {
                    name: entry.name.clone(),
                    needed,
                    available: rest.len(),
                });
            }
            let (chunk, tail) = rest.split_at(needed);
            rest = tail;
            let values: Vec<f64> = match entry.dtype {
                Dtype::F32 => chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let tensor = Tensor::new(entry.shape.clone(), values)
                .map_err(|e| CheckpointError::Manifest(format!("{}: {e}", entry.name)))?;
            params
                .insert(entry.name.clone(), tensor)
                .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        }
        if !rest.is_empty() {
            return Err(CheckpointError::TrailingBytes(rest.len()));
        }
        Ok(Checkpoint {
            kind: manifest.model_kind,
            config: manifest.config,
            params,
        })
    }
}

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    Checkpoint::from_model(model).to_bytes()
}

/// Decode a checkpoint and rebuild its model, checking every tensor shape
/// against the architecture the manifest names.
pub fn load_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    Checkpoint::from_bytes(bytes)?.into_model()
}
