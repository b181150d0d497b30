//! Checkpoint file format.
//!
//! Layout: magic bytes `RLCK`, a little-endian `u32` format version, a
//! length-prefixed JSON header (config, training metadata, and the
//! per-tensor payload index), then the raw little-endian `f32` parameter
//! payload. Round trips are bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelParams, ParamKey, Role};

const MAGIC: &[u8; 4] = b"RLCK";
const VERSION: u32 = 1;

/// Training state carried alongside the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub best_val_loss: f64,
    pub rng_seed: u64,
}

/// A serializable model snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ModelParams<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorIndex>,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    layer: usize,
    role: Role,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

/// Encode a checkpoint into its on-disk byte layout.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for ((layer, role), tensor) in ckpt.params.entries() {
        tensors.push(TensorIndex {
            layer: *layer,
            role: *role,
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header { config: ckpt.config.clone(), meta: ckpt.meta, tensors };
    let json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(4 + 8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decode and validate a checkpoint byte stream.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 12 {
        return Err(fail("file shorter than the fixed header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic bytes, not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + json_len {
        return Err(fail("truncated JSON header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + json_len])?;
    let payload = &bytes[12 + json_len..];

    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload length {} does not match the tensor index ({expected} bytes expected)",
            payload.len()
        )));
    }

    let mut entries: Vec<(ParamKey, Tensor<f32>)> = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let numel: usize = t.shape.iter().product();
        let end = t.offset + numel * 4;
        if end > payload.len() {
            return Err(fail("tensor offset beyond payload"));
        }
        let data: Vec<f32> = payload[t.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(format!("checkpoint tensor layer {} {:?}", t.layer, t.role)));
        }
        entries.push(((t.layer, t.role), Tensor::new(t.shape.clone(), data)?));
    }

    header.config.validate()?;
    Ok(Checkpoint {
        config: header.config,
        meta: header.meta,
        params: ModelParams { entries },
    })
}

/// Write a checkpoint file.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ckpt)?)?;
    Ok(())
}

/// Read and validate a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
