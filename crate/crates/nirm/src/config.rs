//! The experiment configuration file.
//!
//! One TOML document with a top-level `seed`, optional paths and the
//! `[architecture]`, `[risk]`, `[dataset]` and `[train]` tables. Missing keys
//! take their defaults, unknown keys are errors. The seed and the risk
//! weights live only at the top level; `dataset.seed`, `train.seed` and
//! `train.risk` are rejected so a file cannot say two different things.

use std::path::{Path, PathBuf};

use nirm_core::data::DatasetConfig;
use nirm_core::losses::RiskConfig;
use nirm_core::models::ArchitectureConfig;
use nirm_core::train::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_manifest: Option<PathBuf>,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub risk: RiskConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            dataset_manifest: None,
            architecture: ArchitectureConfig::default(),
            risk: RiskConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

const SHADOWED: [(&str, &str, &str); 3] = [
    ("dataset", "seed", "seed"),
    ("train", "seed", "seed"),
    ("train", "risk", "[risk]"),
];

/// Sets `dotted.key = value` in a TOML table. The value is parsed as TOML and
/// taken as a bare string when that fails.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses, applies `key=value` overrides, resolves and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for (section, key, home) in SHADOWED {
            if table.get(section).and_then(|s| s.get(key)).is_some() {
                return Err(Error::Config(format!(
                    "{section}.{key}: set {home} at the top level instead"
                )));
            }
        }
        let mut cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.schema_version != crate::SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version = {} is not supported (expected {})",
                cfg.schema_version,
                crate::SCHEMA_VERSION
            )));
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, overrides)
    }

    /// Copies the top-level seed and risk weights into the sections that use them.
    fn resolve(&mut self) {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.train.risk = self.risk;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve();
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.train.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let field = |section: &str, e: &dyn std::fmt::Display| Error::Config(format!("{section}: {e}"));
        self.architecture.validate().map_err(|e| field("architecture", &e))?;
        self.risk.validate().map_err(|e| field("risk", &e))?;
        self.dataset
            .validate(&self.architecture)
            .map_err(|e| field("dataset", &e))?;
        self.train.validate().map_err(|e| field("train", &e))?;
        Ok(())
    }

    /// The resolved configuration as TOML, with the shadowed keys removed
    /// so that the dump parses back to the same configuration.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for (section, key, _) in SHADOWED {
            if let Some(t) = table.get_mut(section).and_then(|s| s.as_table_mut()) {
                t.remove(key);
            }
        }
        toml::to_string(&table).expect("table serializes")
    }
}
