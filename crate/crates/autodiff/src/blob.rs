//! Tensor blob files: little-endian `f32` data plus a JSON index mapping
//! each tensor name to its shape and byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const BLOB_FILE: &str = "tensors.bin";
pub const INDEX_FILE: &str = "tensors.index.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Writes every tensor of `store` (in store order) to `dir`.
pub fn write_blobs(store: &ParamStore<f32>, dir: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(store.num_elements() * 4);
    let mut index = BTreeMap::new();
    for (_, name, t) in store.iter() {
        index.insert(
            name.to_string(),
            BlobEntry {
                shape: t.shape().to_vec(),
                offset: bytes.len(),
            },
        );
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(BLOB_FILE), bytes)?;
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| TensorError::Format(e.to_string()))?;
    fs::write(dir.join(INDEX_FILE), json + "\n")?;
    Ok(())
}

/// Reads all tensors listed in the index; validates bounds and alignment.
pub fn read_blobs(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(dir.join(BLOB_FILE))?;
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let index: BTreeMap<String, BlobEntry> =
        serde_json::from_str(&text).map_err(|e| TensorError::Format(format!("index: {e}")))?;
    let mut out = Vec::with_capacity(index.len());
    for (name, entry) in index {
        let n = numel(&entry.shape);
        let end = entry.offset + n * 4;
        if entry.offset % 4 != 0 || end > bytes.len() {
            return Err(TensorError::Format(format!(
                "tensor `{name}` spans bytes {}..{end} but blob has {} bytes",
                entry.offset,
                bytes.len()
            )));
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}
