//! Weight snapshot container.
//!
//! ```text
//! b"EVWT" | u32 LE header length | JSON header | f32 LE tensor data…
//! ```
//!
//! The header lists the model configuration, the vocabulary, tensor names and
//! shapes in storage order, and a SHA-256 checksum over the tensor bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{BaseWeights, ModelConfig};
use super::vocab::TOKENS;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVWT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format: String,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub checksum: String,
    /// Free-form provenance (training seed, corpus size, measured solve rates).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Serializes named `f32` tensors into the container.
pub fn encode_container(
    format: &str,
    config: ModelConfig,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
    meta: serde_json::Value,
) -> Vec<u8> {
    let mut data = Vec::new();
    for (_, _, t) in tensors {
        for v in t {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = SnapshotHeader {
        format: format.to_string(),
        config,
        vocabulary: TOKENS.iter().map(|s| s.to_string()).collect(),
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorEntry {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
        checksum: hex::encode(Sha256::digest(&data)),
        meta,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

/// Parses a container, verifying the checksum; returns the header and the
/// tensors in storage order.
pub fn decode_container(bytes: &[u8]) -> Result<(SnapshotHeader, Vec<Vec<f32>>)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Snapshot("missing magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Snapshot("truncated header".into()))?;
    let header: SnapshotHeader =
        serde_json::from_slice(body).map_err(|e| Error::Snapshot(format!("header: {e}")))?;
    let data = &bytes[8 + hlen..];
    let found = hex::encode(Sha256::digest(data));
    if found != header.checksum {
        return Err(Error::Checksum {
            expected: header.checksum.clone(),
            found,
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let chunk = data
            .get(off..off + 4 * n)
            .ok_or_else(|| Error::Snapshot(format!("tensor {} truncated", entry.name)))?;
        tensors.push(
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        off += 4 * n;
    }
    if off != data.len() {
        return Err(Error::Snapshot("trailing bytes after tensors".into()));
    }
    Ok((header, tensors))
}

pub fn save_weights(weights: &BaseWeights, path: &Path, meta: serde_json::Value) -> Result<String> {
    let tensors: Vec<_> = weights
        .tensors()
        .into_iter()
        .map(|(n, s, t)| (n, s, t.iter().map(|v| *v as f32).collect()))
        .collect();
    let bytes = encode_container("evolve-weights/1", weights.cfg, &tensors, meta);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(weights.checksum())
}

pub fn load_weights(path: &Path) -> Result<(BaseWeights, SnapshotHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode_container(&bytes)?;
    if header.vocabulary != TOKENS {
        return Err(Error::Snapshot("vocabulary differs from this build".into()));
    }
    let mut w = BaseWeights::zeros(header.config);
    let expected: Vec<_> = w.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(Error::Snapshot("tensor layout differs from model config".into()));
    }
    for (dst, src) in w.tensors_mut().into_iter().zip(tensors) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s as f64;
        }
    }
    Ok((w, header))
}
