//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! payload of little-endian `f32` tensors. Offsets in the manifest are
//! relative to the start of the payload; every tensor carries the SHA-256
//! of its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use transporter_core::model::{ModelConfig, ModelParams};
use transporter_core::Tensor;

use crate::error::{Error, Result};

pub const FORMAT: &str = "transporter-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub sha256: String,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Optimizer steps taken when the file was written.
    #[serde(default)]
    pub step: usize,
    #[serde(default)]
    pub config_echo: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ModelParams,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes parameters (rounded to `f32`) into the file format.
pub fn encode(
    params: &ModelParams,
    step: usize,
    config_echo: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(4 * params.count());
    let mut tensors = Vec::with_capacity(params.tensors.len());
    for (name, t) in &params.tensors {
        let offset = payload.len() as u64;
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Numeric(format!(
                    "tensor `{name}` is not representable as finite f32"
                )));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
        let sha256 = digest(&payload[offset as usize..]);
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            sha256,
        });
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        model: params.config.clone(),
        step,
        config_echo,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "checkpoint of {} bytes has no header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let body = &bytes[8..];
    if header_len > body.len() as u64 {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let (json, payload) = body.split_at(header_len as usize);
    let header: Header = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint `{}` version {}",
            header.format, header.version
        )));
    }
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor `{}` has dtype `{}`, expected f32",
                t.name, t.dtype
            )));
        }
        spans.push((t.offset, t.offset + t.byte_len(), &t.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!(
                "tensors `{}` and `{}` overlap",
                w[0].2, w[1].2
            )));
        }
    }
    let used: u64 = header.tensors.iter().map(TensorEntry::byte_len).sum();
    if used != payload.len() as u64 {
        return Err(Error::Checksum(format!(
            "manifest describes {used} payload bytes, file holds {}",
            payload.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    for t in &header.tensors {
        let bytes = &payload[t.offset as usize..(t.offset + t.byte_len()) as usize];
        if digest(bytes) != t.sha256 {
            return Err(Error::Checksum(format!(
                "tensor `{}` does not match its sha256",
                t.name
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if tensors
            .insert(t.name.clone(), Tensor::new(&t.shape, data)?)
            .is_some()
        {
            return Err(Error::Format(format!("tensor `{}` listed twice", t.name)));
        }
    }
    let params = ModelParams {
        config: header.model.clone(),
        tensors,
    };
    Ok(Checkpoint { header, params })
}

/// Writes through a temporary file so an interrupted write never leaves a
/// half-written checkpoint under `path`.
pub fn save(
    path: &Path,
    params: &ModelParams,
    step: usize,
    config_echo: serde_json::Value,
) -> Result<()> {
    let bytes = encode(params, step, config_echo)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; the parameters are not checked against the model
/// configuration (see [`load_params`]).
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a checkpoint and checks that its tensors match its model
/// configuration.
pub fn load_params(path: &Path) -> Result<Checkpoint> {
    let c = load(path)?;
    c.params.validate()?;
    Ok(c)
}
