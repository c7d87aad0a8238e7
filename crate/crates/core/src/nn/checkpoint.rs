//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "UDGANCKP"
//! version      u32       CHECKPOINT_VERSION
//! header_len   u64       byte length of the JSON header
//! header       JSON      { "meta": CheckpointMeta, "tensors": [{name, shape, offset, len}] }
//! payload      f32 LE    tensors concatenated in header order (sorted by name)
//! ```
//!
//! `offset` and `len` count f32 elements from the start of the payload.
//! Readers accept any file whose version is not newer than their own.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, UdGan};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"UDGANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training stage that produced the weights (0 = untrained).
    pub stage: u8,
    pub epochs_completed: usize,
    pub model: ModelConfig,
    /// Snapshot of the full run configuration.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorRecord>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes every parameter and buffer of `model`.
pub fn save_checkpoint(path: &Path, model: &UdGan, meta: &CheckpointMeta) -> Result<()> {
    let mut records = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, p) in model.params().named() {
        let values = p.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        records.push(TensorRecord {
            name,
            shape: p.var.dims().to_vec(),
            offset,
            len: values.len(),
        });
        offset += values.len();
        payload.reserve(values.len() * 4);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: records,
    })?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&payload)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads the metadata and named tensors without building a model.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| ckpt_err(path, e.to_string()))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version > CHECKPOINT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {version} is newer than supported {CHECKPOINT_VERSION}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(ckpt_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    let payload = &body[header_len..];
    let mut tensors = BTreeMap::new();
    for r in header.tensors {
        let start = r.offset * 4;
        let end = start + r.len * 4;
        if end > payload.len() || r.shape.iter().product::<usize>() != r.len {
            return Err(ckpt_err(path, format!("tensor `{}` is truncated or misshapen", r.name)));
        }
        let values: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(r.name, Tensor::from_vec(values, r.shape, &Device::Cpu)?);
    }
    Ok((header.meta, tensors))
}

/// Rebuilds a [`UdGan`] with the reference backbone and loads its weights.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(UdGan, CheckpointMeta)> {
    let (meta, tensors) = read_checkpoint(path)?;
    let model = UdGan::new(meta.model.clone(), 0, device)?;
    model
        .params()
        .load(&tensors)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok((model, meta))
}
