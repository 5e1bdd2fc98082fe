//! Evaluation reports and the ablation table.

use std::path::{Path, PathBuf};

use nirm_core::data::{Dataset, Split};
use nirm_core::losses::{EnvTag, EnvironmentBatch, RiskConfig};
use nirm_core::metrics::{
    ablation_csv, ablation_table, ablation_text, aggregate, sample_metrics, AblationRow, EvalReport,
};
use nirm_core::models::ArchitectureConfig;
use nirm_core::train::{Predictor, TrainError, Variant};
use rayon::prelude::*;

use crate::checkpoint::load_checkpoint;
use crate::datafile::{data_fields_match, load_dataset};
use crate::run::verify_run;
use crate::{read, sha256_hex, write, write_json, Error, Result};

/// Samples per parallel evaluation chunk.
const CHUNK: usize = 64;

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "in_domain" => Ok(Split::InDomain),
        "ood" => Ok(Split::Ood),
        _ => Err(Error::Config(format!(
            "unknown split `{s}` (expected train, in_domain or ood)"
        ))),
    }
}

/// Same result as [`nirm_core::metrics::evaluate`], with the predictions
/// computed in parallel chunks and the per-sample values reduced in sample
/// order.
pub fn evaluate_parallel(
    predictor: &Predictor,
    arch: &ArchitectureConfig,
    batches: &[EnvironmentBatch],
    split: Split,
    cfg: &RiskConfig,
    variant: Option<Variant>,
    checkpoint: &str,
) -> Result<EvalReport> {
    let mut environments = Vec::with_capacity(batches.len());
    for b in batches {
        let per_sample: Vec<Vec<(f64, f64)>> = b
            .samples()
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<_, TrainError> {
                let sub = EnvironmentBatch::new(b.tag(), chunk.to_vec())?;
                let pred = predictor.predict(arch, chunk)?;
                Ok(sample_metrics(&pred, &sub, cfg)?)
            })
            .collect::<Result<_, _>>()?;
        let id = match b.tag() {
            EnvTag::Label(id) | EnvTag::Minibatch(id) => id,
        };
        environments.push(aggregate(id, &per_sample.concat()));
    }
    Ok(EvalReport {
        variant,
        checkpoint: checkpoint.to_string(),
        split,
        environments,
    })
}

/// A model checkpoint together with what evaluation needs from its manifest.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub predictor: Predictor,
    pub arch: ArchitectureConfig,
    pub risk: RiskConfig,
    pub variant: Option<Variant>,
    pub blob_sha256: String,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = load_checkpoint(path)?;
    let predictor = ckpt.predictor().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: "checkpoint does not hold a complete model (encoder with decoder or head)".into(),
    })?;
    let m = ckpt.manifest;
    Ok(LoadedModel {
        predictor,
        arch: m.meta.architecture,
        risk: m.meta.risk,
        variant: m.meta.variant,
        blob_sha256: m.blob_sha256,
    })
}

pub fn evaluate_model(model: &LoadedModel, data: &Dataset, split: Split) -> Result<EvalReport> {
    if !data_fields_match(&model.arch, &data.arch) {
        return Err(Error::Config(
            "checkpoint architecture does not match the dataset (horizon, n_points, v_max or feature dimensions)"
                .into(),
        ));
    }
    evaluate_parallel(
        &model.predictor,
        &model.arch,
        &data.split(split),
        split,
        &model.risk,
        model.variant,
        &model.blob_sha256,
    )
}

/// Overlay of the first `count` samples of the split.
pub fn overlay_svg(model: &LoadedModel, data: &Dataset, split: Split, count: usize) -> Result<String> {
    let samples: Vec<_> = data
        .split(split)
        .iter()
        .flat_map(|b| b.samples().to_vec())
        .take(count)
        .collect();
    let preds = model.predictor.predict(&model.arch, &samples)?;
    let panels: Vec<(String, _, _)> = samples
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(i, (s, p))| {
            (
                format!("#{i} env {} v={:.1} m/s", s.obs.environment_id, s.obs.speed),
                &s.truth,
                p,
            )
        })
        .collect();
    let variant = model.variant.map_or("-", Variant::tag);
    Ok(crate::svg::overlay(&format!("{variant} / {}", split.name()), &panels))
}

/// Files written for one evaluation.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub csv: PathBuf,
    pub text: PathBuf,
    pub json: PathBuf,
    pub overlay: Option<PathBuf>,
}

pub fn write_eval(report: &EvalReport, out: &Path, overlay: Option<&str>) -> Result<EvalOutputs> {
    let name = report.split.name();
    let outputs = EvalOutputs {
        csv: out.join(format!("{name}.csv")),
        text: out.join(format!("{name}.txt")),
        json: out.join(format!("{name}.json")),
        overlay: overlay.map(|_| out.join(format!("{name}_overlay.svg"))),
    };
    write(&outputs.csv, report.to_csv().as_bytes())?;
    write(&outputs.text, report.to_text().as_bytes())?;
    write_json(&outputs.json, report)?;
    if let (Some(svg), Some(path)) = (overlay, &outputs.overlay) {
        write(path, svg.as_bytes())?;
    }
    Ok(outputs)
}

/// Evaluates the model checkpoint at `checkpoint` on `split` of the dataset
/// at `data` and writes the report files under `out`.
pub fn eval_command(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out: &Path,
    overlay_samples: usize,
) -> Result<(EvalReport, EvalOutputs)> {
    let model = load_model(checkpoint)?;
    let dataset = load_dataset(data)?;
    let report = evaluate_model(&model, &dataset, split)?;
    let svg = match overlay_samples {
        0 => None,
        n => Some(overlay_svg(&model, &dataset, split, n)?),
    };
    let outputs = write_eval(&report, out, svg.as_deref())?;
    Ok((report, outputs))
}

/// In-domain and OOD reports of one run.
#[derive(Debug, Clone)]
pub struct RunEvaluation {
    pub run: PathBuf,
    pub variant: Variant,
    pub seed: u64,
    pub in_domain: EvalReport,
    pub ood: EvalReport,
}

pub fn evaluate_run(dir: &Path) -> Result<RunEvaluation> {
    let record = verify_run(dir)?;
    let manifest = &record.dataset.manifest;
    if sha256_hex(&read(manifest)?) != record.dataset.sha256 {
        return Err(Error::Checksum { path: manifest.clone() });
    }
    let data = load_dataset(manifest)?;
    let model = load_model(&dir.join(&record.model.manifest))?;
    Ok(RunEvaluation {
        run: dir.to_path_buf(),
        variant: record.variant,
        seed: record.seed,
        in_domain: evaluate_model(&model, &data, Split::InDomain)?,
        ood: evaluate_model(&model, &data, Split::Ood)?,
    })
}

pub fn ablation_rows(runs: &[RunEvaluation]) -> Vec<AblationRow> {
    let pairs: Vec<_> = runs.iter().map(|r| (&r.in_domain, &r.ood)).collect();
    ablation_table(&Variant::ALL, &pairs)
}

/// Files written by [`report_command`].
#[derive(Debug, Clone)]
pub struct ReportOutputs {
    pub csv: PathBuf,
    pub text: PathBuf,
    pub chart: PathBuf,
}

/// Evaluates every run directory and writes the ablation table (CSV and
/// text), the bar chart and the per-run reports under `out`.
pub fn report_command(runs: &[PathBuf], out: &Path) -> Result<(Vec<AblationRow>, ReportOutputs)> {
    let evals = runs.iter().map(|r| evaluate_run(r)).collect::<Result<Vec<_>>>()?;
    for e in &evals {
        let dir = out.join("runs").join(format!("{}_seed{}", e.variant.tag(), e.seed));
        write_eval(&e.in_domain, &dir, None)?;
        write_eval(&e.ood, &dir, None)?;
    }
    let rows = ablation_rows(&evals);
    let outputs = ReportOutputs {
        csv: out.join("ablation.csv"),
        text: out.join("ablation.txt"),
        chart: out.join("ablation.svg"),
    };
    write(&outputs.csv, ablation_csv(&rows).as_bytes())?;
    write(&outputs.text, ablation_text(&rows).as_bytes())?;
    write(&outputs.chart, crate::svg::bar_chart(&rows).as_bytes())?;
    Ok((rows, outputs))
}
