//! Displacement error, per-environment evaluation and the ablation table.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::losses::{risk, EnvTag, EnvironmentBatch, LossError, RiskConfig};
use crate::models::{ArchitectureConfig, Trajectory};
use crate::train::{Predictor, TrainError, Variant, VariantFlags};

/// Mean Euclidean distance between corresponding grid points.
pub fn ade(predicted: &Trajectory, truth: &Trajectory) -> Result<f64, LossError> {
    if !predicted.same_grid(truth) {
        return Err(LossError::GridMismatch);
    }
    if predicted.is_empty() {
        return Err(LossError::Empty("trajectory"));
    }
    let total: f64 = predicted
        .points
        .iter()
        .zip(&truth.points)
        .map(|(p, t)| libm::hypot(p.longitudinal - t.longitudinal, p.lateral - t.lateral))
        .sum();
    Ok(total / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentMetrics {
    pub environment_id: u32,
    pub samples: usize,
    /// Mean ADE in meters.
    pub ade: f64,
    /// Mean per-sample weighted risk.
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Option<Variant>,
    /// Identifies the evaluated parameters, typically a checksum.
    pub checkpoint: String,
    pub split: Split,
    pub environments: Vec<EnvironmentMetrics>,
}

impl EvalReport {
    pub fn samples(&self) -> usize {
        self.environments.iter().map(|e| e.samples).sum()
    }

    fn weighted(&self, f: impl Fn(&EnvironmentMetrics) -> f64) -> f64 {
        let n = self.samples();
        if n == 0 {
            return f64::NAN;
        }
        self.environments.iter().map(|e| f(e) * e.samples as f64).sum::<f64>() / n as f64
    }

    /// Sample-weighted mean ADE over all environments.
    pub fn total_ade(&self) -> f64 {
        self.weighted(|e| e.ade)
    }

    pub fn total_risk(&self) -> f64 {
        self.weighted(|e| e.risk)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("environment_id,samples,ade_m,risk\n");
        for e in &self.environments {
            let _ = writeln!(s, "{},{},{:.17e},{:.17e}", e.environment_id, e.samples, e.ade, e.risk);
        }
        let _ = writeln!(
            s,
            "total,{},{:.17e},{:.17e}",
            self.samples(),
            self.total_ade(),
            self.total_risk()
        );
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let variant = self.variant.map_or("-", Variant::tag);
        let _ = writeln!(
            s,
            "variant {variant}  split {}  checkpoint {}",
            self.split.name(),
            self.checkpoint
        );
        let _ = writeln!(
            s,
            "{:>11}  {:>7}  {:>10}  {:>12}",
            "environment", "samples", "ADE (m)", "risk"
        );
        for e in &self.environments {
            let _ = writeln!(
                s,
                "{:>11}  {:>7}  {:>10.4}  {:>12.4}",
                e.environment_id, e.samples, e.ade, e.risk
            );
        }
        let _ = writeln!(
            s,
            "{:>11}  {:>7}  {:>10.4}  {:>12.4}",
            "total",
            self.samples(),
            self.total_ade(),
            self.total_risk()
        );
        s
    }
}

/// Per-sample ADE and risk of `predicted` against the batch truths.
pub fn sample_metrics(
    predicted: &[Trajectory],
    batch: &EnvironmentBatch,
    cfg: &RiskConfig,
) -> Result<Vec<(f64, f64)>, LossError> {
    if predicted.len() != batch.len() {
        return Err(LossError::GridMismatch);
    }
    predicted
        .iter()
        .zip(batch.samples())
        .map(|(p, s)| Ok((ade(p, &s.truth)?, risk(p, &s.truth, cfg)?)))
        .collect()
}

/// Aggregates per-sample `(ade, risk)` pairs in order.
pub fn aggregate(environment_id: u32, per_sample: &[(f64, f64)]) -> EnvironmentMetrics {
    let n = per_sample.len();
    let (a, r) = per_sample.iter().fold((0.0, 0.0), |(a, r), (x, y)| (a + x, r + y));
    EnvironmentMetrics {
        environment_id,
        samples: n,
        ade: a / n.max(1) as f64,
        risk: r / n.max(1) as f64,
    }
}

fn environment_id(batch: &EnvironmentBatch) -> u32 {
    match batch.tag() {
        EnvTag::Label(id) | EnvTag::Minibatch(id) => id,
    }
}

/// Runs `predictor` on every sample of `batches` and reports per-environment
/// means. Sequential and deterministic.
pub fn evaluate(
    predictor: &Predictor,
    arch: &ArchitectureConfig,
    batches: &[EnvironmentBatch],
    split: Split,
    cfg: &RiskConfig,
    variant: Option<Variant>,
    checkpoint: &str,
) -> Result<EvalReport, TrainError> {
    let environments = batches
        .iter()
        .map(|b| {
            let pred = predictor.predict(arch, b.samples())?;
            Ok(aggregate(environment_id(b), &sample_metrics(&pred, b, cfg)?))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(EvalReport {
        variant,
        checkpoint: checkpoint.into(),
        split,
        environments,
    })
}

/// One row of the ablation table; ADE columns are seed means, absent when
/// no run of the variant was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub flags: VariantFlags,
    pub seeds: usize,
    pub in_domain_ade: Option<f64>,
    pub in_domain_std: Option<f64>,
    pub ood_ade: Option<f64>,
    pub ood_std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (Some(m), Some(libm::sqrt(var)))
}

/// Builds rows for `variants` (in that order) from `(in-domain, OOD)` report
/// pairs, one pair per seed.
pub fn ablation_table(variants: &[Variant], runs: &[(&EvalReport, &EvalReport)]) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|&v| {
            let mine: Vec<_> = runs.iter().filter(|(i, _)| i.variant == Some(v)).collect();
            let ind: Vec<f64> = mine.iter().map(|(i, _)| i.total_ade()).collect();
            let ood: Vec<f64> = mine.iter().map(|(_, o)| o.total_ade()).collect();
            let (in_domain_ade, in_domain_std) = mean_std(&ind);
            let (ood_ade, ood_std) = mean_std(&ood);
            AblationRow {
                variant: v,
                flags: v.flags(),
                seeds: mine.len(),
                in_domain_ade,
                in_domain_std,
                ood_ade,
                ood_std,
            }
        })
        .collect()
}

fn tick(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        ""
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.17e}"))
}

pub const ABLATION_CSV_HEADER: &str = "variant,dfx,dpt,irm,seeds,in_domain_ade_m,in_domain_std_m,ood_ade_m,ood_std_m";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.variant.tag(),
            u8::from(r.flags.dfx),
            u8::from(r.flags.dpt),
            r.flags.irm.label(),
            r.seeds,
            opt(r.in_domain_ade),
            opt(r.in_domain_std),
            opt(r.ood_ade),
            opt(r.ood_std)
        );
    }
    s
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let cell = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => String::from("absent"),
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:^3} {:^3} {:^5} {:>5}  {:>15}  {:>15}",
        "Variant", "DFX", "DPT", "IRM", "seeds", "in-domain ADE", "OOD ADE"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:^3} {:^3} {:^5} {:>5}  {:>15}  {:>15}",
            r.variant.display_name(),
            tick(r.flags.dfx),
            tick(r.flags.dpt),
            r.flags.irm.label(),
            r.seeds,
            cell(r.in_domain_ade, r.in_domain_std),
            cell(r.ood_ade, r.ood_std)
        );
    }
    s
}
