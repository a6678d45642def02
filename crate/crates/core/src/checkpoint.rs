//! Versioned checkpoint blobs: an 8-byte magic, a little-endian `u32`
//! format version, a `u64` header length, a JSON header (with the model
//! config embedded) and a safetensors payload.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SGGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub kind: String,
    pub format_version: u32,
    pub config: serde_json::Value,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode<C: Serialize>(
    kind: &str,
    config: &C,
    metadata: serde_json::Value,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_owned(),
        format_version: FORMAT_VERSION,
        config: serde_json::to_value(config)?,
        metadata,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), None)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8], expected_kind: &str) -> Result<(Header, HashMap<String, Tensor>)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds `{}`, expected `{expected_kind}`",
            header.kind
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&body[len..], &Device::Cpu)?;
    Ok((header, tensors))
}

pub fn config_of<C: DeserializeOwned>(header: &Header) -> Result<C> {
    serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))
}

pub fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::CheckpointMissing(path.to_owned()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
