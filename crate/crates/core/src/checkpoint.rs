//! Self-describing checkpoint container shared by the tokenizer and the
//! language model: a JSON header (format version, section kind, config echo,
//! parameter manifest) followed by concatenated float32 little-endian blobs,
//! the same scalar convention as the AMOT motion format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ParamSet, Real, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"MLCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected MLCK, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("checkpoint kind mismatch: expected '{expected}', found '{found}'")]
    KindMismatch { expected: String, found: String },
    #[error("parameter '{0}' missing from checkpoint")]
    MissingParam(String),
    #[error("parameter '{name}' shape mismatch: model {model:?}, checkpoint {ckpt:?}")]
    ShapeMismatch { name: String, model: Vec<usize>, ckpt: Vec<usize> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// An in-memory checkpoint: named tensors plus the config that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_params<F: Real, C: Serialize>(
        kind: &str,
        config: &C,
        params: &ParamSet<F>,
    ) -> Result<Checkpoint, CheckpointError> {
        let params = params
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    p.tensor.shape().to_vec(),
                    p.tensor.data().iter().map(|&v| v.f64() as f32).collect(),
                )
            })
            .collect();
        Ok(Checkpoint { kind: kind.to_string(), config: serde_json::to_value(config)?, params })
    }

    /// Copy checkpoint tensors into a freshly constructed ParamSet. Every
    /// model parameter must be present with a matching shape.
    pub fn load_into<F: Real>(&self, params: &mut ParamSet<F>) -> Result<(), CheckpointError> {
        for (_, p) in params.iter() {
            let entry = self
                .params
                .iter()
                .find(|(n, _, _)| n == &p.name)
                .ok_or_else(|| CheckpointError::MissingParam(p.name.clone()))?;
            if entry.1 != p.tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    model: p.tensor.shape().to_vec(),
                    ckpt: entry.1.clone(),
                });
            }
        }
        for (_, p) in params.iter_mut() {
            let entry = self.params.iter().find(|(n, _, _)| n == &p.name).unwrap();
            p.tensor = Tensor::new(entry.1.clone(), entry.2.iter().map(|&v| F::of(v as f64)).collect());
        }
        Ok(())
    }

    pub fn config_as<C: for<'a> Deserialize<'a>>(&self) -> Result<C, CheckpointError> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let header = Header {
        format_version: CKPT_VERSION,
        kind: ckpt.kind.clone(),
        config: ckpt.config.clone(),
        params: ckpt
            .params
            .iter()
            .map(|(name, shape, _)| ParamEntry { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, _, data) in &ckpt.params {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated { expected: 12, got: bytes.len() });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(CheckpointError::Truncated { expected: 12 + hlen, got: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])?;
    let mut offset = 12 + hlen;
    let mut params = Vec::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let end = offset + n * 4;
        if bytes.len() < end {
            return Err(CheckpointError::Truncated { expected: end, got: bytes.len() });
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push((e.name.clone(), e.shape.clone(), data));
        offset = end;
    }
    Ok(Checkpoint { kind: header.kind, config: header.config, params })
}
