//! Parameter checkpoints.
//!
//! A checkpoint is a single JSON document:
//!
//! ```json
//! {
//!   "format": "rtgen-params",
//!   "version": 1,
//!   "meta": { ... },
//!   "tensors": [
//!     { "name": "saig.layer0.qkv.weight", "shape": [64, 192], "data": "<base64>" }
//!   ]
//! }
//! ```
//!
//! `data` is the base64 encoding of the row-major values as little-endian
//! IEEE-754 `f64`, so a load reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::graph::ParamSet;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "rtgen-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn to_json(params: &ParamSet, meta: serde_json::Value) -> Result<String> {
    let tensors = params
        .iter()
        .map(|(_, name, t)| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            TensorEntry {
                name: name.to_owned(),
                shape: [t.rows(), t.cols()],
                data: STANDARD.encode(bytes),
            }
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        meta,
        tensors,
    };
    Ok(serde_json::to_string(&file)?)
}

/// Parses a checkpoint into a fresh parameter set plus its metadata.
pub fn from_json(text: &str) -> Result<(ParamSet, serde_json::Value)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let mut ps = ParamSet::new();
    for entry in file.tensors {
        let bytes = STANDARD
            .decode(&entry.data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Checkpoint(format!("{}: truncated data", entry.name)));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let [r, c] = entry.shape;
        let t = Tensor2D::new(r, c, values).map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        if ps.id(&entry.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", entry.name)));
        }
        ps.add(entry.name, t);
    }
    Ok((ps, file.meta))
}

pub fn save(params: &ParamSet, meta: serde_json::Value, path: &Path) -> Result<()> {
    fs::write(path, to_json(params, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    from_json(&fs::read_to_string(path)?)
}

/// Copies every tensor of `src` into the same-named tensor of `dst`.
pub fn restore_into(dst: &mut ParamSet, src: &ParamSet) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for (_, name, value) in src.iter() {
        let id = dst
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if dst.get(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        *dst.get_mut(id) = value.clone();
    }
    Ok(())
}
