//! Persisted model checkpoints.
//!
//! File layout (little-endian):
//!
//! ```text
//! "UTCK" | version u32 | header JSON (u32 length + UTF-8) |
//! section count u32 | per section: name (u32 length + UTF-8), element count u64, f64 values |
//! 32-byte SHA-256 content hash
//! ```
//!
//! The header JSON holds the model config and training metadata. The content
//! hash covers the canonical config JSON and every section's name and values,
//! but not the metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Result, TdaError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::config::ModelConfig;
use super::params::{section_specs, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps taken to produce the checkpoint.
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub converged: bool,
    /// Free-form provenance, e.g. the base checkpoint and unlearning config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub meta: CheckpointMeta,
    hash: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

pub fn content_hash<T: Scalar>(config: &ModelConfig, params: &ModelParams<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for (name, t) in params.iter() {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.len() as u64).to_le_bytes());
        for v in t.as_slice() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    h.finalize().into()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>, meta: CheckpointMeta) -> Self {
        let hash = content_hash(&config, &params);
        Self {
            config,
            params,
            meta,
            hash,
        }
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.hash
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash)
    }

    /// Replaces the parameters and refreshes the content hash.
    pub fn with_params(&self, params: ModelParams<T>, meta: CheckpointMeta) -> Self {
        Self::new(self.config.clone(), params, meta)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        };
        w.string(&serde_json::to_string(&header).expect("header serializes"));
        w.u32(self.params.num_sections() as u32);
        for (name, t) in self.params.iter() {
            w.string(name);
            w.u64(t.len() as u64);
            w.f64s(t.as_slice().iter().map(|v| v.as_f64()));
        }
        w.bytes(&self.hash);
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let at = r.offset();
        let header_text = r.string("header")?;
        let header: Header = serde_json::from_str(&header_text).map_err(|e| TdaError::Format {
            offset: at,
            reason: format!("header JSON: {e}"),
        })?;
        header.config.validate()?;
        let specs = section_specs(&header.config);
        let count = r.u32("section count")? as usize;
        if count != specs.len() {
            return r.fail(format!("{count} sections, config implies {}", specs.len()));
        }
        let mut sections = Vec::with_capacity(count);
        for (name, rows, cols) in specs {
            let got = r.string("section name")?;
            if got != name {
                return r.fail(format!("section {got:?} where {name:?} was expected"));
            }
            let n = r.u64("element count")? as usize;
            if n != rows * cols {
                return r.fail(format!(
                    "section {name} has {n} elements, expected {}",
                    rows * cols
                ));
            }
            let values = r
                .f64s(n, "section values")?
                .into_iter()
                .map(T::lit)
                .collect();
            sections.push((name, Matrix::from_vec(rows, cols, values)?));
        }
        let params = ModelParams::from_sections(&header.config, sections)?;
        let at = r.offset();
        let stored: [u8; 32] = r.take(32, "content hash")?.try_into().expect("32 bytes");
        r.finish()?;
        let ckpt = Self::new(header.config, params, header.meta);
        if ckpt.hash != stored {
            return Err(TdaError::Format {
                offset: at,
                reason: "content hash does not match config and parameters".into(),
            });
        }
        Ok(ckpt)
    }
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
