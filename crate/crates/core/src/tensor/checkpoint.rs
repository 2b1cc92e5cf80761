//! Named-tensor checkpoints: a JSON manifest at `<path>` and the raw values
//! as little-endian `f64` at `<path>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "mtwf-checkpoint-1";

pub fn blob_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".bin");
    name.into()
}

pub fn save(
    path: &Path,
    config: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<(), ModelError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        config,
        tensors: entries,
    };
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(blob_path(path), blob)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>), ModelError> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.format != FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    let blob = fs::read(blob_path(path))?;
    if blob.len() % 8 != 0 {
        return Err(ModelError::Checkpoint(
            "blob length is not a multiple of 8".into(),
        ));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = values.get(e.offset..e.offset + n).ok_or_else(|| {
            ModelError::Checkpoint(format!("tensor {} runs past the blob", e.name))
        })?;
        out.push((e.name, Tensor::new(&e.shape, data.to_vec())?));
    }
    Ok((manifest.config, out))
}
