//! File formats, run orchestration and reports around `nirm-core`.
//!
//! * [`checkpoint`]: parameter sets as a JSON manifest plus a little-endian
//!   `f64` blob, checksummed per tensor.
//! * [`datafile`]: the synthetic benchmark as per-environment record files.
//! * [`config`]: the TOML experiment configuration.
//! * [`run`]: resumable, checkpointed training runs.
//! * [`report`]: evaluation reports, ablation tables and SVG plots.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub mod checkpoint;
pub mod config;
pub mod datafile;
pub mod report;
pub mod run;
mod svg;

pub use nirm_core as core;

/// Version written into every manifest this crate produces.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the output root used when `--out` is absent.
pub const OUT_DIR_ENV: &str = "NIRM_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported schema_version {found} (expected {expected})")]
    Schema { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: checksum mismatch in tensor `{tensor}`")]
    TensorChecksum { path: PathBuf, tensor: String },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] nirm_core::train::TrainError),
    #[error(transparent)]
    Data(#[from] nirm_core::data::DataError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename, creating
/// parent directories as needed.
pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("manifest types serialize");
    bytes.push(b'\n');
    write(path, &bytes)
}

pub(crate) fn check_schema(path: &Path, found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn f64_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

pub(crate) fn f64_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}
