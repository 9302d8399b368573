//! Parameter checkpoints.
//!
//! Layout: `b"MIVW\n"`, one JSON manifest line
//! (`{"stage":..,"fold":..,"config":{..},"tensors":[{"name":..,"shape":[..]},..]}`)
//! terminated by `\n`, then every tensor as little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{UNetConfig, UNetParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MIVW\n";

/// Trained weights plus the stage/fold they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub fold: Option<usize>,
    pub params: UNetParams<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: u8,
    fold: Option<usize>,
    config: UNetConfig,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let manifest = Manifest {
            stage: self.stage,
            fold: self.fold,
            config: self.params.config,
            tensors: self
                .params
                .layout()
                .into_iter()
                .map(|(name, shape)| TensorEntry { name, shape })
                .collect(),
        };
        let json = serde_json::to_string(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for t in self.params.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::Checkpoint("missing MIVW magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unterminated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::Checkpoint(format!("manifest JSON: {e}")))?;
        manifest.config.validate()?;
        let mut params = UNetParams::<f32>::zeros(manifest.config);
        let layout = params.layout();
        if layout.len() != manifest.tensors.len()
            || layout
                .iter()
                .zip(&manifest.tensors)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(Error::Checkpoint(
                "tensor manifest does not match the declared architecture".into(),
            ));
        }
        let payload = &rest[nl + 1..];
        let expected = params.num_parameters() * 4;
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        let mut chunks = payload.chunks_exact(4);
        for t in params.tensors_mut() {
            for (v, c) in t.iter_mut().zip(&mut chunks) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Checkpoint {
            stage: manifest.stage,
            fold: manifest.fold,
            params,
        })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| e.in_file(path))
}
