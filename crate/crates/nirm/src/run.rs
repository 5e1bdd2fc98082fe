//! Checkpointed training runs.
//!
//! A run directory holds:
//!
//! ```text
//! run.json                 RunRecord
//! timings.json             wall-clock seconds per stage
//! effective_config.toml    the resolved configuration
//! checkpoints/<name>.{json,bin}
//! stages/<stage>.json      what a finished stage produced; lets a rerun resume
//! stages/latents.json      the stage 2 latent table
//! curves/<stage>.csv       loss curves
//! ```
//!
//! Everything except `timings.json` is a deterministic function of the
//! configuration and the dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nirm_core::data::{Dataset, Split};
use nirm_core::train::{
    train_variant, LatentEntry, LatentTable, LossCurve, Stage, StageResult, StageStore, TrainError, Variant,
};
use nirm_core::ParameterSet;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, manifest_path, save_checkpoint, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::datafile::{data_fields_match, load_dataset};
use crate::{check_schema, read, read_json, sha256_hex, write, write_json, Error, Result};

pub const RUN_FILE: &str = "run.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const CONFIG_FILE: &str = "effective_config.toml";
/// Name of the checkpoint holding the trained model of every variant.
pub const MODEL_CHECKPOINT: &str = "model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRef {
    pub name: String,
    /// Manifest path relative to the run directory.
    pub manifest: String,
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: Stage,
    pub checkpoints: Vec<CheckpointRef>,
    /// Loss curve CSV relative to the run directory; absent for stages
    /// without a curve.
    pub curve: Option<String>,
    pub summary: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub manifest: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub variant: Variant,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dataset: DatasetRef,
    pub stages: Vec<StageRecord>,
    pub model: CheckpointRef,
    /// File holding the wall-clock timings, relative to the run directory.
    pub timings: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    /// Loaded from an earlier run instead of trained.
    pub resumed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

/// Checkpoint names for a stage's parameter roles.
fn checkpoint_groups(stage: Stage, roles: &[&str]) -> Vec<(String, Vec<String>)> {
    let owned = |r: &[&str]| r.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match stage {
        Stage::Gan => roles.iter().map(|r| (r.to_string(), vec![r.to_string()])).collect(),
        Stage::Pretrain => vec![("encoder_pretrained".into(), owned(roles))],
        Stage::Inference => Vec::new(),
        Stage::Finetune | Stage::Joint | Stage::LatentIrm => vec![(MODEL_CHECKPOINT.into(), owned(roles))],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageFile {
    schema_version: u32,
    stage: Stage,
    fingerprint: String,
    /// `(role, checkpoint name)` in result order.
    params: Vec<(String, String)>,
    curve: LossCurve,
    summary: Vec<(String, f64)>,
    latents: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatentRow {
    env: usize,
    index: usize,
    z: Option<Vec<f64>>,
    /// `None` stands for a non-finite objective.
    objective_initial: Option<f64>,
    objective_best: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn latent_rows(t: &LatentTable) -> Vec<LatentRow> {
    t.entries
        .iter()
        .map(|e| LatentRow {
            env: e.env,
            index: e.index,
            z: e.z.clone(),
            objective_initial: finite(e.objective_initial),
            objective_best: finite(e.objective_best),
        })
        .collect()
}

fn latent_table(rows: Vec<LatentRow>) -> LatentTable {
    LatentTable {
        entries: rows
            .into_iter()
            .map(|r| LatentEntry {
                env: r.env,
                index: r.index,
                z: r.z,
                objective_initial: r.objective_initial.unwrap_or(f64::NAN),
                objective_best: r.objective_best.unwrap_or(f64::NAN),
            })
            .collect(),
    }
}

fn stage_file(dir: &Path, stage: Stage) -> PathBuf {
    dir.join("stages").join(format!("{}.json", stage.name()))
}

fn curve_file(stage: Stage) -> String {
    format!("curves/{}.csv", stage.name())
}

pub fn curve_csv(curve: &LossCurve) -> String {
    let mut s = String::from("step");
    for c in &curve.columns {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (step, values) in &curve.rows {
        s.push_str(&step.to_string());
        for v in values {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

/// [`StageStore`] over a run directory.
struct FileStore {
    dir: PathBuf,
    meta: CheckpointMeta,
    fingerprint: String,
    timings: Vec<StageTiming>,
    started: Option<Instant>,
    log: Box<dyn FnMut(&str)>,
}

fn store_err(e: Error) -> TrainError {
    TrainError::Store(e.to_string())
}

impl FileStore {
    fn load_stage(&mut self, stage: Stage) -> Result<Option<StageResult>> {
        let path = stage_file(&self.dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let f: StageFile = read_json(&path)?;
        check_schema(&path, f.schema_version)?;
        if f.fingerprint != self.fingerprint || f.stage != stage {
            return Err(Error::Format {
                path,
                message: "written by a run with a different configuration or dataset; use a fresh output directory"
                    .into(),
            });
        }
        let mut params = Vec::new();
        let mut loaded = BTreeMap::new();
        for (role, name) in &f.params {
            if !loaded.contains_key(name) {
                let ckpt = load_checkpoint(&manifest_path(&self.dir.join("checkpoints"), name))?;
                loaded.insert(name.clone(), ckpt);
            }
            let part = loaded[name].part(role).ok_or_else(|| Error::Format {
                path: path.clone(),
                message: format!("checkpoint `{name}` lacks role `{role}`"),
            })?;
            params.push((role.clone(), part.clone()));
        }
        let latents = match &f.latents {
            Some(file) => Some(latent_table(read_json(&self.dir.join(file))?)),
            None => None,
        };
        Ok(Some(StageResult {
            params,
            curve: f.curve,
            latents,
            summary: f.summary,
        }))
    }

    fn save_stage(&mut self, stage: Stage, r: &StageResult) -> Result<()> {
        let roles: Vec<&str> = r.params.iter().map(|(role, _)| role.as_str()).collect();
        let mut params = Vec::new();
        for (name, group) in checkpoint_groups(stage, &roles) {
            let parts: Vec<(&str, &ParameterSet)> = r
                .params
                .iter()
                .filter(|(role, _)| group.contains(role))
                .map(|(role, p)| (role.as_str(), p))
                .collect();
            save_checkpoint(&self.dir.join("checkpoints"), &name, &self.meta, &parts)?;
            params.extend(group.into_iter().map(|role| (role, name.clone())));
        }
        let latents = match &r.latents {
            Some(t) => {
                let file = "stages/latents.json".to_string();
                write_json(&self.dir.join(&file), &latent_rows(t))?;
                Some(file)
            }
            None => None,
        };
        write(&self.dir.join(curve_file(stage)), curve_csv(&r.curve).as_bytes())?;
        let f = StageFile {
            schema_version: crate::SCHEMA_VERSION,
            stage,
            fingerprint: self.fingerprint.clone(),
            params,
            curve: r.curve.clone(),
            summary: r.summary.clone(),
            latents,
        };
        write_json(&stage_file(&self.dir, stage), &f)
    }
}

impl StageStore for FileStore {
    fn load(&mut self, stage: Stage) -> Result<Option<StageResult>, TrainError> {
        let r = self.load_stage(stage).map_err(store_err)?;
        if r.is_some() {
            (self.log)(&format!("stage {}: resumed from {}", stage.name(), self.dir.display()));
            self.timings.push(StageTiming {
                stage,
                resumed: true,
                seconds: 0.0,
            });
        } else {
            self.started = Some(Instant::now());
        }
        Ok(r)
    }

    fn save(&mut self, stage: Stage, result: &StageResult) -> Result<(), TrainError> {
        let seconds = self.started.take().map_or(0.0, |t| t.elapsed().as_secs_f64());
        (self.log)(&format!("stage {}: done in {seconds:.1} s", stage.name()));
        self.timings.push(StageTiming {
            stage,
            resumed: false,
            seconds,
        });
        self.save_stage(stage, result).map_err(store_err)
    }
}

/// Checks the dataset against the run configuration.
pub fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if !data_fields_match(&cfg.architecture, &data.arch) {
        return Err(Error::Config(
            "architecture horizon, n_points, v_max or feature dimensions differ from the dataset's".into(),
        ));
    }
    Ok(())
}

/// Trains `cfg.train.variant` on the dataset at `data_manifest`, writing the
/// run directory `out`. Stages already present in `out` are reused.
pub fn train_run(
    cfg: &ExperimentConfig,
    data_manifest: &Path,
    out: &Path,
    log: impl FnMut(&str) + 'static,
) -> Result<RunRecord> {
    let t0 = Instant::now();
    let data_manifest = std::fs::canonicalize(data_manifest).map_err(crate::io_err(data_manifest))?;
    let data = load_dataset(&data_manifest)?;
    check_dataset(cfg, &data)?;
    let dataset = DatasetRef {
        sha256: sha256_hex(&read(&data_manifest)?),
        manifest: data_manifest,
    };
    let mut snapshot = cfg.clone();
    snapshot.output_dir = None;
    snapshot.dataset_manifest = Some(dataset.manifest.clone());
    let fingerprint = sha256_hex(
        format!(
            "{}\n{}",
            serde_json::to_string(&snapshot).expect("config serializes"),
            dataset.sha256
        )
        .as_bytes(),
    );
    let variant = cfg.train.variant;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        variant: Some(variant),
        architecture: cfg.architecture.clone(),
        risk: cfg.risk,
    };
    let mut store = FileStore {
        dir: out.to_path_buf(),
        meta,
        fingerprint,
        timings: Vec::new(),
        started: None,
        log: Box::new(log),
    };
    let train = data.split(Split::Train);
    let outcome = train_variant(&train, &cfg.architecture, &cfg.train, &mut store, None)?;
    // Only after training: a rejected resume must leave the existing run intact.
    write(&out.join(CONFIG_FILE), snapshot.to_toml().as_bytes())?;

    let mut stages = Vec::new();
    let mut model = None;
    for (stage, r) in &outcome.stages {
        let roles: Vec<&str> = r.params.iter().map(|(role, _)| role.as_str()).collect();
        let mut checkpoints = Vec::new();
        for (name, _) in checkpoint_groups(*stage, &roles) {
            let rel = format!("checkpoints/{name}.json");
            let ckpt = load_checkpoint(&out.join(&rel))?;
            let reference = CheckpointRef {
                name: name.clone(),
                manifest: rel,
                blob_sha256: ckpt.manifest.blob_sha256,
            };
            if name == MODEL_CHECKPOINT {
                model = Some(reference.clone());
            }
            checkpoints.push(reference);
        }
        let curve = (!r.curve.columns.is_empty()).then(|| curve_file(*stage));
        stages.push(StageRecord {
            stage: *stage,
            checkpoints,
            curve,
            summary: r.summary.iter().cloned().collect(),
        });
    }
    let model = model.ok_or_else(|| Error::Format {
        path: out.to_path_buf(),
        message: "no model checkpoint was produced".into(),
    })?;
    let record = RunRecord {
        schema_version: crate::SCHEMA_VERSION,
        variant,
        seed: cfg.seed,
        config: snapshot,
        dataset,
        stages,
        model,
        timings: TIMINGS_FILE.into(),
    };
    write_json(&out.join(RUN_FILE), &record)?;
    let timings = Timings {
        stages: store.timings,
        total_seconds: t0.elapsed().as_secs_f64(),
    };
    write_json(&out.join(TIMINGS_FILE), &timings)?;
    verify_run(out)?;
    Ok(record)
}

/// Loads `run.json` and verifies every checkpoint it references.
pub fn verify_run(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(RUN_FILE);
    let record: RunRecord = read_json(&path)?;
    check_schema(&path, record.schema_version)?;
    let all = record.stages.iter().flat_map(|s| &s.checkpoints).chain([&record.model]);
    for c in all {
        let ckpt = load_checkpoint(&dir.join(&c.manifest))?;
        if ckpt.manifest.blob_sha256 != c.blob_sha256 {
            return Err(Error::Checksum {
                path: dir.join(&c.manifest),
            });
        }
    }
    Ok(record)
}
