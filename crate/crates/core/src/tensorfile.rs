// SPDX-License-Identifier: MIT OR Apache-2.0

//! Manifest + blob tensor storage.
//!
//! A store is a JSON manifest listing `(name, shape, offset)` for every tensor
//! and a sibling `.bin` file holding the values as little-endian `f32`, packed
//! in manifest order. Offsets count elements, not bytes. The manifest also
//! carries free-form metadata (model config, sample table, ...).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "headsteer-f32-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

fn blob_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `tensors` to `manifest_path` and a `.bin` blob beside it.
pub fn write(manifest_path: &Path, metadata: serde_json::Value, tensors: &[Tensor]) -> Result<()> {
    let blob_path = blob_path_for(manifest_path);
    let mut entries = Vec::with_capacity(tensors.len());
    let total: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut bytes = Vec::with_capacity(total * 4);
    let mut offset = 0;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Weight {
                name: t.name.clone(),
                reason: format!("shape {:?} needs {expected} values, got {}", t.shape, t.data.len()),
            });
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.data.len();
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_owned(),
        dtype: "f32".to_owned(),
        blob: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        metadata,
        tensors: entries,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;
    fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

/// Reads a manifest and its blob.
pub fn read(manifest_path: &Path) -> Result<(serde_json::Value, Vec<Tensor>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.dtype != "f32" {
        return Err(Error::Invalid(format!(
            "{}: unsupported dtype `{}`",
            manifest_path.display(),
            manifest.dtype
        )));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!(
            "{}: blob length {} is not a multiple of 4",
            blob_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + len;
        if end > values.len() {
            return Err(Error::Weight {
                name: entry.name,
                reason: format!("range {}..{end} exceeds blob of {} values", entry.offset, values.len()),
            });
        }
        tensors.push(Tensor {
            name: entry.name,
            shape: entry.shape,
            data: values[entry.offset..end].to_vec(),
        });
    }
    Ok((manifest.metadata, tensors))
}
