//! Checkpoint container.
//!
//! A single JSON document:
//!
//! ```text
//! { "format": "agentdiff-ckpt/1", "dtype": "f32", "config": {...},
//!   "step": 1234, "meta": {...},
//!   "arrays": [ { "name": "tok_emb", "rows": 256, "cols": 64,
//!                 "data": "<base64 of little-endian values>" }, ... ] }
//! ```
//!
//! Arrays are stored in the model's fixed parameter order. Raw bytes make
//! save/load bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Float, Matrix, ModelConfig, Parameters};
use crate::error::{Error, Result};

pub const FORMAT: &str = "agentdiff-ckpt/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredArray {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stored {
    format: String,
    dtype: String,
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
    arrays: Vec<StoredArray>,
}

/// Parameters plus the training-step counter and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub params: Parameters<F>,
    pub step: u64,
    pub meta: serde_json::Value,
}

impl<F: Float> Checkpoint<F> {
    pub fn new(params: Parameters<F>, step: u64) -> Self {
        Checkpoint {
            params,
            step,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let arrays = self
            .params
            .names()
            .iter()
            .zip(self.params.arrays())
            .map(|(name, m)| {
                let mut bytes = Vec::with_capacity(m.len() * F::BYTES);
                for x in &m.data {
                    x.write_le(&mut bytes);
                }
                StoredArray {
                    name: name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                    data: STANDARD.encode(bytes),
                }
            })
            .collect();
        let stored = Stored {
            format: FORMAT.into(),
            dtype: F::DTYPE.into(),
            config: self.params.config,
            step: self.step,
            meta: self.meta.clone(),
            arrays,
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed container: {e}")))?;
        if stored.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", stored.format)));
        }
        if stored.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, expected {}",
                stored.dtype,
                F::DTYPE
            )));
        }
        let mut names = Vec::with_capacity(stored.arrays.len());
        let mut arrays = Vec::with_capacity(stored.arrays.len());
        for a in stored.arrays {
            let bytes = STANDARD
                .decode(&a.data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", a.name)))?;
            if bytes.len() != a.rows * a.cols * F::BYTES {
                return Err(Error::Checkpoint(format!("{}: truncated data", a.name)));
            }
            let data = bytes.chunks_exact(F::BYTES).map(F::read_le).collect();
            arrays.push(Matrix::from_vec(a.rows, a.cols, data)?);
            names.push(a.name);
        }
        Ok(Checkpoint {
            params: Parameters::from_parts(stored.config, names, arrays)?,
            step: stored.step,
            meta: stored.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
