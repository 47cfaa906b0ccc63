//! Binary array container: 4-byte magic, little-endian `u64` header length,
//! a JSON header describing every array, then the raw `f32` payloads.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, IoContext, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RPCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes arrays as `f32` along with free-form metadata.
pub fn write_arrays<T: Scalar>(path: &Path, arrays: &IndexMap<String, Tensor<T>>, meta: serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 4;
    }
    let header = serde_json::to_vec(&Header { arrays: entries, meta })?;
    let mut buf = Vec::with_capacity(12 + header.len() + offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in arrays.values() {
        for &v in t.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).at(path)
}

pub fn read_arrays(path: &Path) -> Result<(IndexMap<String, Tensor<f32>>, serde_json::Value)> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path).at(path)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(IndexMap<String, Tensor<f32>>, serde_json::Value)> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("eight bytes")) as usize;
    let payload_start = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header runs past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut arrays = IndexMap::with_capacity(header.arrays.len());
    let mut expected = 0;
    for entry in header.arrays {
        if entry.dtype != "f32" {
            return Err(corrupt(&format!("unsupported dtype {}", entry.dtype)));
        }
        let len: usize = entry.shape.iter().product();
        let end = entry
            .offset
            .checked_add(len * 4)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| corrupt(&format!("array {} truncated", entry.name)))?;
        let data: Vec<f32> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(&format!("array {} has non-finite values", entry.name)));
        }
        expected = expected.max(end);
        arrays.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    if expected != payload.len() {
        return Err(corrupt("payload length does not match header"));
    }
    Ok((arrays, header.meta))
}

/// Location of the config written next to a checkpoint.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn write_config(path: &Path, cfg: &ModelConfig) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(cfg)?).at(path)
}

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let cfg: ModelConfig = serde_json::from_slice(&fs::read(path).at(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}
