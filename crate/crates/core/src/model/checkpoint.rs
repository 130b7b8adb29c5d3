//! Single-file checkpoint archive: a JSON header (metadata plus tensor
//! directory) followed by raw little-endian f32 data. Loading validates
//! every name and shape and fails loudly on any mismatch.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use super::{ModelConfig, RecurrentEstimator};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"CELABCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    BadHeader(String),
    #[error("bad model config: {0}")]
    Config(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes named tensors plus a metadata value. The write is atomic
/// (temp file + rename).
pub fn save_archive(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &ArrayD<f32>)],
) -> Result<(), CheckpointError> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, arr)| TensorEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for (_, arr) in tensors {
            let owned;
            let slice = match arr.as_slice() {
                Some(s) => s,
                None => {
                    owned = arr.as_standard_layout().to_owned();
                    owned.as_slice().unwrap()
                }
            };
            for &v in slice {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads back the metadata and all tensors.
pub fn load_archive(
    path: &Path,
) -> Result<(serde_json::Value, Vec<(String, ArrayD<f32>)>), CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        tensors.push((entry.name, arr));
    }
    Ok((header.meta, tensors))
}

/// Saves a model: config, manifest hash, and every parameter.
pub fn save_model(
    path: &Path,
    model: &RecurrentEstimator<f32>,
    manifest_hash: &str,
) -> Result<(), CheckpointError> {
    let meta = serde_json::json!({
        "kind": "model",
        "config": model.config,
        "manifest_hash": manifest_hash,
    });
    let tensors: Vec<(String, &ArrayD<f32>)> = (0..model.store.len())
        .map(|i| (model.store.names()[i].clone(), model.store.value(i)))
        .collect();
    save_archive(path, &meta, &tensors)
}

/// Loads a model checkpoint, rebuilding the parameter store from the stored
/// config and validating every tensor name and shape.
pub fn load_model(path: &Path) -> Result<(RecurrentEstimator<f32>, String), CheckpointError> {
    let (meta, tensors) = load_archive(path)?;
    let config: ModelConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| CheckpointError::BadHeader("missing config".to_string()))?,
    )
    .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let manifest_hash = meta
        .get("manifest_hash")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    let mut model = RecurrentEstimator::<f32>::new(config)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    load_into_store(&mut model.store, tensors)?;
    Ok((model, manifest_hash))
}

/// Installs tensors into an existing store; every parameter must be present
/// exactly once with the right shape.
pub(crate) fn load_into_store(
    store: &mut ParamStore<f32>,
    tensors: Vec<(String, ArrayD<f32>)>,
) -> Result<(), CheckpointError> {
    let expected: std::collections::BTreeSet<String> = store.names().iter().cloned().collect();
    let mut seen = std::collections::BTreeSet::new();
    for (name, arr) in tensors {
        if !expected.contains(&name) {
            return Err(CheckpointError::ParamMismatch(format!(
                "unexpected tensor `{name}` in checkpoint"
            )));
        }
        store
            .set(&name, arr)
            .map_err(CheckpointError::ParamMismatch)?;
        seen.insert(name);
    }
    if seen.len() != expected.len() {
        let missing: Vec<String> = expected.difference(&seen).cloned().collect();
        return Err(CheckpointError::ParamMismatch(format!(
            "checkpoint is missing parameters: {missing:?}"
        )));
    }
    Ok(())
}
