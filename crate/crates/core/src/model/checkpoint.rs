//! Binary checkpoint format.
//!
//! ```text
//! magic    b"DFCK"
//! version  u32 LE
//! hlen     u32 LE
//! header   hlen bytes of JSON: {"config": {...}, "tensors": [{"name", "shape", "offset"}]}
//! payload  f32 LE values; `offset` counts elements from the payload start
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::encoder::{parameter_shapes, EncoderModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Serializes named tensors with an arbitrary JSON config.
pub fn encode_tensors(config: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        config,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses bytes written by [`encode_tensors`].
pub fn decode_tensors(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(Error::CheckpointTruncated {
                needed: n,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(12)?;
    if &bytes[..4] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(12 + hlen)?;
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
    let payload = &bytes[12 + hlen..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset * 4;
        let end = start + numel * 4;
        if payload.len() < end {
            return Err(Error::CheckpointTruncated {
                needed: 12 + hlen + end,
                found: bytes.len(),
            });
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok((header.config, out))
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<()> {
    let config = serde_json::to_value(model.config())?;
    let bytes = encode_tensors(config, &model.params.named())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from the tensors and embedded config in `bytes`.
pub fn model_from_bytes(bytes: &[u8]) -> Result<EncoderModel> {
    let (config, tensors) = decode_tensors(bytes)?;
    let config: EncoderConfig = serde_json::from_value(config)
        .map_err(|e| Error::CheckpointFormat(format!("config: {e}")))?;
    config.validate()?;
    let expected = parameter_shapes(&config);
    let expected_named = expected.named();
    if tensors.len() != expected_named.len() {
        return Err(Error::CheckpointFormat(format!(
            "expected {} tensors, found {}",
            expected_named.len(),
            tensors.len()
        )));
    }
    let mut loaded = tensors.into_iter();
    let params = expected.map(|name, shape| {
        let (found_name, t) = loaded.next().expect("count checked");
        (name.to_string(), shape.clone(), found_name, t)
    });
    for (name, shape, found_name, t) in params.named().into_iter().map(|(_, v)| v) {
        if name != found_name {
            return Err(Error::CheckpointFormat(format!("expected tensor {name}, found {found_name}")));
        }
        if t.shape() != shape.as_slice() {
            return Err(Error::CheckpointShape {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    let params = params.map(|_, (_, _, _, t)| t.clone().with_grad());
    Ok(EncoderModel::from_parts(config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &EncoderConfig) -> Result<EncoderModel> {
    let model = load_checkpoint(path)?;
    let want = parameter_shapes(expected);
    for ((name, want), (_, got)) in want.named().into_iter().zip(model.params.named()) {
        if want != got.shape() {
            return Err(Error::CheckpointShape {
                name,
                expected: want.clone(),
                found: got.shape().to_vec(),
            });
        }
    }
    if model.config().layers != expected.layers || model.config().heads != expected.heads {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}
