//! Binary archive convention shared by corpora, shards, core-sets, model
//! checkpoints and distillates.
//!
//! ```text
//! OSFL-ARCHIVE/1\n
//! <manifest as one line of JSON>\n
//! <payload: concatenated 32-bit little-endian IEEE-754 floats>
//! ```
//!
//! Offsets recorded in manifests are byte offsets relative to the start of
//! the payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"OSFL-ARCHIVE/1\n";

/// Serializes an archive, returning `(bytes, payload_bytes)`.
pub fn encode<M: Serialize>(manifest: &M, blobs: &[&[f32]]) -> Result<(Vec<u8>, u64)> {
    let header = serde_json::to_string(manifest).map_err(|e| Error::Archive(e.to_string()))?;
    let payload: usize = blobs.iter().map(|b| b.len() * 4).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 1 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for blob in blobs {
        for v in *blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok((out, payload as u64))
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<f32>)> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Archive("missing archive magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Archive("unterminated manifest".into()))?;
    let manifest: M =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::Archive(format!("manifest: {e}")))?;
    let payload = &rest[nl + 1..];
    if payload.len() % 4 != 0 {
        return Err(Error::Archive(format!("payload of {} bytes is not a whole number of floats", payload.len())));
    }
    let floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((manifest, floats))
}

/// Writes an archive and returns the payload byte count.
pub fn write<M: Serialize>(path: &Path, manifest: &M, blobs: &[&[f32]]) -> Result<u64> {
    let (bytes, payload) = encode(manifest, blobs)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(payload)
}

pub fn read<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Slices `len` floats starting at byte `offset` of a decoded payload.
pub fn slice(payload: &[f32], offset: u64, len: usize) -> Result<&[f32]> {
    if offset % 4 != 0 {
        return Err(Error::Archive(format!("offset {offset} is not float-aligned")));
    }
    let start = (offset / 4) as usize;
    payload
        .get(start..start + len)
        .ok_or_else(|| Error::Archive(format!("blob at byte {offset} (+{len} floats) exceeds payload")))
}
