//! Checkpoints: `<name>.json` lists every tensor with its role, shape, byte
//! offset and SHA-256; `<name>.bin` holds the values as little-endian `f64`,
//! row-major, concatenated in manifest order.

use std::path::{Path, PathBuf};

use nirm_core::losses::RiskConfig;
use nirm_core::models::ArchitectureConfig;
use nirm_core::train::{Predictor, Variant};
use nirm_core::{ParameterSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::{check_schema, f64_bytes, f64_values, read, read_json, sha256_hex, write, write_json, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    /// Which parameter set the tensor belongs to, e.g. `encoder`.
    pub role: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub sha256: String,
}

/// Run facts recorded alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub variant: Option<Variant>,
    pub architecture: ArchitectureConfig,
    pub risk: RiskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub name: String,
    pub meta: CheckpointMeta,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    /// Role → parameters, in manifest order.
    pub parts: Vec<(String, ParameterSet)>,
}

impl Checkpoint {
    pub fn part(&self, role: &str) -> Option<&ParameterSet> {
        self.parts.iter().find(|(r, _)| r == role).map(|(_, p)| p)
    }

    /// The model the parts form, if any.
    pub fn predictor(&self) -> Option<Predictor> {
        Predictor::from_parts(self.parts.iter().map(|(r, p)| (r.as_str(), p)))
    }
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.bin`; returns the manifest.
pub fn save_checkpoint(
    dir: &Path,
    name: &str,
    meta: &CheckpointMeta,
    parts: &[(&str, &ParameterSet)],
) -> Result<CheckpointManifest> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (role, params) in parts {
        for (tname, t) in params.iter() {
            let bytes = f64_bytes(t.data().iter().copied());
            tensors.push(TensorEntry {
                role: role.to_string(),
                name: tname.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                sha256: sha256_hex(&bytes),
            });
            blob.extend_from_slice(&bytes);
        }
    }
    let manifest = CheckpointManifest {
        schema_version: crate::SCHEMA_VERSION,
        name: name.to_string(),
        meta: meta.clone(),
        blob: format!("{name}.bin"),
        blob_bytes: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
        tensors,
    };
    write(&dir.join(&manifest.blob), &blob)?;
    write_json(&manifest_path(dir, name), &manifest)?;
    Ok(manifest)
}

/// Reads and verifies a checkpoint from its manifest path.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_json(path)?;
    check_schema(path, manifest.schema_version)?;
    let blob_path = path.parent().unwrap_or(Path::new("")).join(&manifest.blob);
    let blob = read(&blob_path)?;
    let format = |message: String| Error::Format {
        path: blob_path.clone(),
        message,
    };
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(format(format!(
            "{} bytes, manifest records {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut parts: Vec<(String, ParameterSet)> = Vec::new();
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * count;
        if e.offset != expected_offset || end > blob.len() {
            return Err(format(format!("tensor `{}` lies outside the blob layout", e.name)));
        }
        expected_offset = end as u64;
        let bytes = &blob[start..end];
        if sha256_hex(bytes) != e.sha256 {
            return Err(Error::TensorChecksum {
                path: blob_path.clone(),
                tensor: format!("{}/{}", e.role, e.name),
            });
        }
        let tensor = Tensor::new(e.shape.clone(), f64_values(bytes))
            .map_err(|err| format(format!("tensor `{}`: {err}", e.name)))?;
        let slot = match parts.iter().position(|(r, _)| *r == e.role) {
            Some(i) => i,
            None => {
                parts.push((e.role.clone(), ParameterSet::new()));
                parts.len() - 1
            }
        };
        parts[slot]
            .1
            .insert(e.name.clone(), tensor)
            .map_err(|err| format(format!("tensor `{}`: {err}", e.name)))?;
    }
    if expected_offset != manifest.blob_bytes || sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Checksum { path: blob_path });
    }
    Ok(Checkpoint { manifest, parts })
}
