//! Parameter checkpoints: a JSON manifest plus one little-endian f32 blob.
//!
//! ```text
//! {
//!   "format": "magnet-params",
//!   "version": 1,
//!   "dtype": "float32-le",
//!   "blob": "params.bin",
//!   "tensors": { "<name>": { "shape": [..], "offset": <bytes>, "length": <bytes> } }
//! }
//! ```
//! Tensors are stored in name order, back to back, with no padding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "magnet-params";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blob: String,
    pub tensors: BTreeMap<String, CheckpointEntry>,
}

/// Writes `{stem}.json` and `{stem}.bin` into `dir`.
pub fn save_checkpoint(params: &ParamStore, dir: &Path, stem: &str) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = BTreeMap::new();
    for (name, t) in params.iter() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name.clone(),
            CheckpointEntry {
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() as u64 - offset,
            },
        );
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        dtype: "float32-le".to_string(),
        blob: blob_name.clone(),
        tensors,
    };
    fs::write(dir.join(&blob_name), &blob)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<ParamStore> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "float32-le" {
        return Err(TensorError::Invalid(format!(
            "unsupported checkpoint {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    let mut store = ParamStore::new();
    for (name, e) in &manifest.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
        if end > blob.len() || e.length % 4 != 0 {
            return Err(TensorError::Invalid(format!(
                "tensor {name} spans bytes {start}..{end} of a {}-byte blob",
                blob.len()
            )));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(store)
}
