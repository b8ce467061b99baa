//! Model checkpoints.
//!
//! Layout (little-endian): magic `CAPS`, u32 version = 1, u32 config length,
//! UTF-8 JSON config, then each parameter tensor in declaration order as
//! u8 rank, rank × u32 dims and the f64 payload. The JSON object may carry
//! one extra key, `trained_on`, naming the training dataset.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::config::CapsNetConfig;
use super::model::CapsNet;
use super::ModelError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CAPS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0}, expected 1")]
    Version(u32),
    #[error("truncated checkpoint at offset {0}")]
    Truncated(usize),
    #[error("embedded config is invalid: {0}")]
    Config(String),
    #[error("checkpoint config differs from the requested one at `{field}`: stored {stored}, requested {requested}")]
    ConfigMismatch {
        field: String,
        stored: String,
        requested: String,
    },
    #[error("{0} trailing bytes after the last parameter")]
    TrailingBytes(usize),
    #[error(transparent)]
    Model(#[from] Box<ModelError>),
}

pub const TRAINED_ON_KEY: &str = "trained_on";

#[derive(Serialize)]
struct Header<'a> {
    #[serde(flatten)]
    config: &'a CapsNetConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    trained_on: Option<&'a str>,
}

/// A decoded checkpoint with its training-dataset name, if recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CapsNet,
    pub trained_on: Option<String>,
}

pub fn encode_checkpoint(model: &CapsNet) -> Vec<u8> {
    encode_checkpoint_with(model, None)
}

pub fn encode_checkpoint_with(model: &CapsNet, trained_on: Option<&str>) -> Vec<u8> {
    let json = serde_json::to_string(&Header {
        config: model.config(),
        trained_on,
    })
    .expect("plain data");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for p in model.params() {
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() - *pos < n {
        return Err(CheckpointError::Truncated(*pos));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().expect("4 bytes")))
}

/// First differing leaf between two JSON values, as a dotted path.
fn first_difference(path: &str, a: &Value, b: &Value) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                first_difference(&sub, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null))
            })
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .enumerate()
            .find_map(|(i, (p, q))| first_difference(&format!("{path}[{i}]"), p, q)),
        _ if a == b => None,
        _ => Some((path.to_string(), a.to_string(), b.to_string())),
    }
}

/// Decodes a checkpoint. When `expected` is given the stored config must
/// match it exactly; the first differing field is reported.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&CapsNetConfig>) -> Result<CapsNet, CheckpointError> {
    decode_checkpoint_full(bytes, expected).map(|c| c.model)
}

pub fn decode_checkpoint_full(bytes: &[u8], expected: Option<&CapsNetConfig>) -> Result<Checkpoint, CheckpointError> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 4).map_err(|_| CheckpointError::BadMagic(bytes.to_vec()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = read_u32(bytes, &mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = read_u32(bytes, &mut pos)? as usize;
    let json = std::str::from_utf8(take(bytes, &mut pos, len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut stored: Value = serde_json::from_str(json).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let trained_on = match stored.as_object_mut().and_then(|o| o.remove(TRAINED_ON_KEY)) {
        None => None,
        Some(Value::String(name)) => Some(name),
        Some(other) => return Err(CheckpointError::Config(format!("`{TRAINED_ON_KEY}` must be a string, got {other}"))),
    };
    if let Some(want) = expected {
        let want = serde_json::to_value(want).expect("plain data");
        if let Some((field, stored, requested)) = first_difference("", &stored, &want) {
            return Err(CheckpointError::ConfigMismatch {
                field,
                stored,
                requested,
            });
        }
    }
    let config: CapsNetConfig = serde_json::from_value(stored).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let template = CapsNet::new(config.clone()).map_err(|e| CheckpointError::Model(Box::new(e)))?;
    let mut tensors = Vec::with_capacity(template.params().len());
    for _ in template.params() {
        let rank = take(bytes, &mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(bytes, &mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes_needed = n.checked_mul(8).ok_or(CheckpointError::Truncated(pos))?;
        let payload = take(bytes, &mut pos, bytes_needed)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Config(e.to_string()))?;
        tensors.push(t);
    }
    if pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - pos));
    }
    let model = CapsNet::from_parts(config, tensors).map_err(|e| CheckpointError::Model(Box::new(e)))?;
    Ok(Checkpoint { model, trained_on })
}

pub fn save_checkpoint(model: &CapsNet, path: &Path) -> Result<(), CheckpointError> {
    save_checkpoint_with(model, None, path)
}

pub fn save_checkpoint_with(model: &CapsNet, trained_on: Option<&str>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint_with(model, trained_on)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<&CapsNetConfig>) -> Result<CapsNet, CheckpointError> {
    load_checkpoint_full(path, expected).map(|c| c.model)
}

pub fn load_checkpoint_full(path: &Path, expected: Option<&CapsNetConfig>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint_full(&bytes, expected)
}
