//! Checkpoint container: a JSON manifest followed by one little-endian `f64` blob.
//!
//! Layout on disk:
//!
//! ```text
//! b"MGCKPT01" | u64 manifest length | manifest JSON | blob
//! ```
//!
//! The manifest lists every tensor with its shape and byte offset into the blob,
//! plus a SHA-256 of the blob so corruption is detected on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{read_file, write_file};
use crate::error::{Error, Result};
use crate::model::ModelParams;

const MAGIC: &[u8; 8] = b"MGCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Resolved run configuration (free-form JSON owned by the caller).
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_len: usize,
    pub blob_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(config: &serde_json::Value, params: &ModelParams) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(8 * params.n_scalars());
    let mut tensors = Vec::new();
    for (name, shape, data) in params.tensors() {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f64".into(),
            offset: blob.len(),
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: config.clone(),
        tensors,
        blob_len: blob.len(),
        blob_sha256: sha256_hex(&blob),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save(path: &Path, config: &serde_json::Value, params: &ModelParams) -> Result<()> {
    write_file(path, &encode(config, params)?)
}

/// Parses and integrity-checks a checkpoint, returning the manifest and the blob.
pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<u8>)> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..json_end]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let blob = &bytes[json_end..];
    if blob.len() != manifest.blob_len {
        return Err(corrupt("blob length differs from manifest"));
    }
    if sha256_hex(blob) != manifest.blob_sha256 {
        return Err(corrupt("checksum mismatch; the blob is corrupt"));
    }
    Ok((manifest, blob.to_vec()))
}

pub fn load(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    decode(&read_file(path)?)
}

/// Fills `template` (built from the run config) with the stored tensors,
/// matching them by name and shape.
pub fn restore_params(manifest: &Manifest, blob: &[u8], template: &mut ModelParams) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = template
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(template.n_scalars());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape || entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match model tensor `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let count: usize = shape.iter().product();
        let end = entry.offset + 8 * count;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` exceeds the blob")))?;
        flat.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
    }
    template.assign_flat(&flat)
}
