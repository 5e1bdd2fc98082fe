//! On-disk form of the synthetic benchmark.
//!
//! `manifest.json` holds the generating configuration and one entry per
//! environment file. Each `env_<id>.bin` is a sequence of fixed-size records
//! of little-endian `f64`: invariant features, spurious features, speed, then
//! the `n_points` trajectory points as `(longitudinal, lateral)` pairs.

use std::path::{Path, PathBuf};

use nirm_core::data::{Dataset, DatasetConfig, EnvironmentData, EnvironmentRole, Observation};
use nirm_core::losses::Sample;
use nirm_core::models::{ArchitectureConfig, Trajectory};
use serde::{Deserialize, Serialize};

use crate::{check_schema, f64_bytes, f64_values, read, read_json, sha256_hex, write, write_json, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentFile {
    pub environment_id: u32,
    pub role: EnvironmentRole,
    /// Relative to the manifest.
    pub file: String,
    pub records: usize,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    /// Field order of one record.
    pub record_layout: String,
    pub record_values: usize,
    pub config: DatasetConfig,
    pub architecture: ArchitectureConfig,
    pub files: Vec<EnvironmentFile>,
}

fn layout(arch: &ArchitectureConfig) -> (String, usize) {
    let text = format!(
        "invariant_features[{}] spurious_features[{}] speed trajectory[{}][longitudinal, lateral]; f64 little-endian",
        arch.invariant_dim, arch.spurious_dim, arch.n_points
    );
    (text, arch.invariant_dim + arch.spurious_dim + 1 + 2 * arch.n_points)
}

fn encode(samples: &[Sample]) -> Vec<u8> {
    f64_bytes(samples.iter().flat_map(|s| {
        s.obs
            .invariant_features
            .iter()
            .chain(&s.obs.spurious_features)
            .copied()
            .chain([s.obs.speed])
            .chain(s.truth.flat())
            .collect::<Vec<_>>()
    }))
}

fn decode(values: &[f64], environment_id: u32, arch: &ArchitectureConfig, width: usize) -> Vec<Sample> {
    let times = arch.times();
    let (ni, ns) = (arch.invariant_dim, arch.spurious_dim);
    values
        .chunks_exact(width)
        .map(|r| {
            let speed = r[ni + ns];
            Sample {
                obs: Observation {
                    invariant_features: r[..ni].to_vec(),
                    spurious_features: r[ni..ni + ns].to_vec(),
                    speed,
                    environment_id,
                },
                truth: Trajectory::from_flat(&times, &r[ni + ns + 1..], speed),
            }
        })
        .collect()
}

/// Writes `dataset` under `dir`; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let (record_layout, record_values) = layout(&dataset.arch);
    let mut files = Vec::new();
    for env in &dataset.environments {
        let file = format!("env_{}.bin", env.spec.environment_id);
        let bytes = encode(&env.samples);
        write(&dir.join(&file), &bytes)?;
        files.push(EnvironmentFile {
            environment_id: env.spec.environment_id,
            role: env.spec.role,
            file,
            records: env.samples.len(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DatasetManifest {
        schema_version: crate::SCHEMA_VERSION,
        seed: dataset.config.seed,
        record_layout,
        record_values,
        config: dataset.config.clone(),
        architecture: dataset.arch.clone(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Generates the dataset described by `config` and writes it under `dir`.
pub fn make_dataset(config: &DatasetConfig, arch: &ArchitectureConfig, dir: &Path) -> Result<PathBuf> {
    save_dataset(&Dataset::generate(config, arch)?, dir)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(path)?;
    check_schema(path, m.schema_version)?;
    Ok(m)
}

/// Reads every environment file named by the manifest at `path`, verifying
/// sizes and checksums.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let m = read_manifest(path)?;
    let bad = |p: &Path, message: String| Error::Format {
        path: p.to_path_buf(),
        message,
    };
    let (_, width) = layout(&m.architecture);
    if width != m.record_values {
        return Err(bad(
            path,
            format!(
                "record_values {} disagrees with the architecture ({width})",
                m.record_values
            ),
        ));
    }
    if m.files.len() != m.config.environments.len() {
        return Err(bad(path, "one file per configured environment expected".into()));
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut environments = Vec::new();
    for (f, spec) in m.files.iter().zip(&m.config.environments) {
        let file = dir.join(&f.file);
        if f.environment_id != spec.environment_id || f.records != spec.sample_count {
            return Err(bad(path, format!("entry for `{}` disagrees with the config", f.file)));
        }
        let bytes = read(&file)?;
        let expected = (8 * width * f.records) as u64;
        if bytes.len() as u64 != f.bytes || f.bytes != expected {
            return Err(bad(
                &file,
                format!("truncated or oversized: {} bytes, expected {expected}", bytes.len()),
            ));
        }
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Checksum { path: file });
        }
        let samples = decode(&f64_values(&bytes), f.environment_id, &m.architecture, width);
        environments.push(EnvironmentData {
            spec: spec.clone(),
            samples,
        });
    }
    Ok(Dataset {
        config: m.config,
        arch: m.architecture,
        environments,
    })
}

/// Architecture fields the data files depend on.
pub fn data_fields_match(a: &ArchitectureConfig, b: &ArchitectureConfig) -> bool {
    a.horizon == b.horizon
        && a.n_points == b.n_points
        && a.v_max == b.v_max
        && a.invariant_dim == b.invariant_dim
        && a.spurious_dim == b.spurious_dim
}
