//! The three training stages and every ablation variant built from them.
//!
//! Stage 1 trains the decoder adversarially, stage 2 inverts the frozen
//! decoder per training sample and regresses an encoder onto the inverted
//! latents, and stage 3 fine-tunes that encoder through the frozen decoder
//! under the gradient-norm penalty. Stage results pass through a
//! [`StageStore`] so callers can persist them and resume.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Graph, Var};
use crate::losses::{
    critic_rows, dummy_scaled_risk_graph, generator_loss_gradient, latent_inference_gradient, nirm_objective_terms,
    wgan_critic_loss, EnvTag, EnvironmentBatch, LossError, RiskConfig, Sample, Trainable,
};
use crate::models::{
    decode_grid_batch, encode_batch, init_params, Activation, ArchitectureConfig, LatentVector, Mlp, ModelError,
    Trajectory,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{ParameterSet, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite {what} in stage `{stage}` at step {step}")]
    Diverged {
        stage: &'static str,
        step: usize,
        what: &'static str,
    },
    #[error("stage `{stage}` needs {missing}")]
    MissingArtifact { stage: &'static str, missing: String },
    #[error("decoder parameters changed during `{0}`")]
    DecoderChanged(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage store: {0}")]
    Store(String),
}

impl TrainError {
    /// Reports a non-finite value raised inside a step as divergence at that step.
    fn at(self, stage: &'static str, step: usize) -> Self {
        match self {
            TrainError::Loss(LossError::Engine(EngineError::NonFinite { .. })) => TrainError::Diverged {
                stage,
                step,
                what: "intermediate value",
            },
            e => e,
        }
    }
}

impl From<EngineError> for TrainError {
    fn from(e: EngineError) -> Self {
        TrainError::Loss(e.into())
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Loss(e.into())
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Loss(e.into())
    }
}

/// The rows of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    E2eNt,
    E2eNtNirm,
    RandomNtNirm,
    TrajIrm,
    LatentIrmv1,
    Ours,
}

/// Which invariance penalty a variant trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IrmKind {
    None,
    Irmv1,
    Nirm,
}

impl IrmKind {
    pub fn label(self) -> &'static str {
        match self {
            IrmKind::None => "",
            IrmKind::Irmv1 => "IRMv1",
            IrmKind::Nirm => "NIRM",
        }
    }
}

/// Ablation flags: decoder frozen (DFX), decoder pre-trained (DPT), penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub dfx: bool,
    pub dpt: bool,
    pub irm: IrmKind,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::E2eNt,
        Variant::E2eNtNirm,
        Variant::RandomNtNirm,
        Variant::TrajIrm,
        Variant::LatentIrmv1,
        Variant::Ours,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::E2eNt => "e2e_nt",
            Variant::E2eNtNirm => "e2e_nt_nirm",
            Variant::RandomNtNirm => "random_nt_nirm",
            Variant::TrajIrm => "traj_irm",
            Variant::LatentIrmv1 => "latent_irmv1",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Ours => "Ours",
            Variant::E2eNt => "E2E NT",
            Variant::E2eNtNirm => "E2E NT+NIRM",
            Variant::RandomNtNirm => "Random NT+NIRM",
            Variant::TrajIrm => "Traj IRM",
            Variant::LatentIrmv1 => "Latent IRMv1",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let f = |dfx, dpt, irm| VariantFlags { dfx, dpt, irm };
        match self {
            Variant::E2eNt => f(false, false, IrmKind::None),
            Variant::E2eNtNirm => f(false, false, IrmKind::Nirm),
            Variant::RandomNtNirm => f(true, false, IrmKind::Nirm),
            Variant::TrajIrm => f(true, false, IrmKind::Irmv1),
            Variant::LatentIrmv1 => f(true, true, IrmKind::Irmv1),
            Variant::Ours => f(true, true, IrmKind::Nirm),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl core::str::FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown variant `{s}`")))
    }
}

/// How penalty terms are grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentMode {
    /// One term per labelled training environment.
    Labeled,
    /// No labels: each pooled minibatch is one term.
    LabelFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSteps {
    /// Stage 1 generator updates.
    pub gan_generator: usize,
    /// Critic updates per generator update.
    pub critic_per_generator: usize,
    /// Stage 2 optimizer steps per sample.
    pub inference: usize,
    /// Stage 2 samples inverted per training environment; all when absent.
    pub inference_samples_per_env: Option<usize>,
    /// Stage 2 encoder regression steps.
    pub regression: usize,
    /// Stage 3 steps, also used by `random_nt_nirm` and the `latent_irmv1` head stage.
    pub finetune: usize,
    /// Steps of the end-to-end baselines (`e2e_nt`, `e2e_nt_nirm`, `traj_irm`).
    pub joint: usize,
}

impl Default for StageSteps {
    fn default() -> Self {
        Self {
            gan_generator: 20_000,
            critic_per_generator: 5,
            inference: 200,
            inference_samples_per_env: None,
            regression: 5_000,
            finetune: 5_000,
            joint: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: Variant,
    pub batch_size: usize,
    pub steps: StageSteps,
    pub risk: RiskConfig,
    /// Encoder and decoder updates.
    pub adam: AdamConfig,
    /// Stage 1 generator and critic updates.
    pub gan_adam: AdamConfig,
    /// Stage 2 latent updates.
    pub latent_adam: AdamConfig,
    pub gp_weight: f64,
    /// Fraction of a penalized stage run with the penalty switched off.
    pub penalty_warmup: f64,
    pub environment_mode: EnvironmentMode,
    /// Loss curves record every this many steps (and the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Ours,
            batch_size: 32,
            steps: StageSteps::default(),
            risk: RiskConfig::default(),
            adam: AdamConfig::with_lr(3e-4),
            gan_adam: AdamConfig {
                lr: 3e-4,
                beta1: 0.5,
                beta2: 0.9,
                eps: 1e-8,
            },
            latent_adam: AdamConfig::with_lr(0.1),
            gp_weight: 10.0,
            penalty_warmup: 0.2,
            environment_mode: EnvironmentMode::Labeled,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.risk.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.steps.critic_per_generator == 0 {
            return bad("steps.critic_per_generator must be positive".into());
        }
        if self.steps.inference_samples_per_env == Some(0) {
            return bad("steps.inference_samples_per_env must be positive when set".into());
        }
        for (name, a) in [
            ("adam", &self.adam),
            ("gan_adam", &self.gan_adam),
            ("latent_adam", &self.latent_adam),
        ] {
            if !a.is_valid() {
                return bad(format!("{name}: lr > 0, betas in [0, 1) and eps > 0 required"));
            }
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            return bad(format!("gp_weight = {} must be >= 0", self.gp_weight));
        }
        if !(0.0..=1.0).contains(&self.penalty_warmup) {
            return bad(format!("penalty_warmup = {} must lie in [0, 1]", self.penalty_warmup));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(16 + stream);
        rng
    }

    /// Penalty weight in effect at `step` of a `total`-step stage.
    pub fn lambda_at(&self, step: usize, total: usize) -> f64 {
        if (step as f64) < self.penalty_warmup * total as f64 {
            0.0
        } else {
            self.risk.lambda_irm
        }
    }
}

/// Named loss series sampled at logged steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossCurve {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn log(&mut self, stage: &'static str, step: usize, values: &[f64]) -> Result<(), TrainError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged {
                stage,
                step,
                what: "loss",
            });
        }
        self.rows.push((step, values.to_vec()));
        Ok(())
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.rows.last().map(|(_, v)| v.as_slice())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }
}

fn should_log(cfg: &TrainConfig, step: usize, total: usize) -> bool {
    step % cfg.log_every == 0 || step + 1 == total
}

fn guard(stage: &'static str, step: usize, what: &'static str, values: &[f64]) -> Result<(), TrainError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TrainError::Diverged { stage, step, what })
    }
}

/// Random subset of `0..len` of size `min(k, len)`, in drawn order.
fn minibatch(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    index::sample(rng, len, k.min(len)).into_vec()
}

/// Per-step environment terms according to the configured mode.
fn draw_terms(
    rng: &mut ChaCha8Rng,
    envs: &[EnvironmentBatch],
    pooled: &EnvironmentBatch,
    cfg: &TrainConfig,
) -> Result<Vec<EnvironmentBatch>, TrainError> {
    match cfg.environment_mode {
        EnvironmentMode::Labeled => envs
            .iter()
            .map(|e| {
                let idx = minibatch(rng, e.len(), cfg.batch_size);
                e.select(&idx).map_err(TrainError::from)
            })
            .collect(),
        EnvironmentMode::LabelFree => (0..envs.len())
            .map(|j| {
                let idx = minibatch(rng, pooled.len(), cfg.batch_size);
                let samples = idx.iter().map(|&i| pooled.samples()[i].clone()).collect();
                EnvironmentBatch::new(EnvTag::Minibatch(j as u32), samples).map_err(TrainError::from)
            })
            .collect(),
    }
}

fn pool(envs: &[EnvironmentBatch]) -> Result<EnvironmentBatch, TrainError> {
    let samples: Vec<Sample> = envs.iter().flat_map(|e| e.samples().iter().cloned()).collect();
    if samples.is_empty() {
        return Err(TrainError::MissingArtifact {
            stage: "training",
            missing: "training samples".into(),
        });
    }
    Ok(EnvironmentBatch::new(EnvTag::Minibatch(0), samples)?)
}

/// Outcome of stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GanOutcome {
    pub decoder: ParameterSet,
    pub critic: ParameterSet,
    pub curve: LossCurve,
}

fn prior_batch(rng: &mut ChaCha8Rng, arch: &ArchitectureConfig, n: usize) -> (Tensor, Vec<f64>) {
    let z: Vec<f64> = (0..n * arch.d_z).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=arch.v_max)).collect();
    (Tensor::matrix(n, arch.d_z, z).expect("sized"), v)
}

/// Stage 1: WGAN-GP training of the decoder against the pooled training
/// trajectories, with latents drawn from `N(0, I)` and condition speeds from
/// `U[0, v_max]`.
pub fn train_decoder_gan(
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<GanOutcome, TrainError> {
    const STAGE: &str = "gan";
    let pooled = pool(train)?;
    let mut decoder = init_params(&arch.decoder(), cfg.seed);
    let mut critic = init_params(&arch.critic(), cfg.seed);
    let mut curve = LossCurve::new(&["critic_loss", "wasserstein", "gradient_penalty", "generator_loss"]);
    let total = cfg.steps.gan_generator;
    let mut rng = cfg.rng(1);
    let mut w = decoder.flatten();
    let mut c = critic.flatten();
    let mut opt_g = Adam::new(cfg.gan_adam, w.len());
    let mut opt_c = Adam::new(cfg.gan_adam, c.len());
    let b = cfg.batch_size;
    for step in 0..total {
        let outcome = (|| -> Result<(), TrainError> {
            let mut last = None;
            for _ in 0..cfg.steps.critic_per_generator {
                let idx = minibatch(&mut rng, pooled.len(), b);
                let real: Vec<Trajectory> = idx.iter().map(|&i| pooled.samples()[i].truth.clone()).collect();
                let (z, v) = prior_batch(&mut rng, arch, real.len());
                let zs: Vec<LatentVector> = z
                    .data()
                    .chunks_exact(arch.d_z)
                    .map(|r| LatentVector(r.to_vec()))
                    .collect();
                let fake = decode_grid_batch(&decoder, arch, &zs, &v)?;
                let mix: Vec<f64> = (0..real.len()).map(|_| rng.random_range(0.0..=1.0)).collect();
                let loss = wgan_critic_loss(
                    &critic,
                    arch,
                    &critic_rows(arch, &real)?,
                    &critic_rows(arch, &fake)?,
                    &mix,
                    cfg.gp_weight,
                )?;
                let grad = loss.gradient.flatten();
                guard(STAGE, step, "critic gradient", &grad)?;
                guard(STAGE, step, "critic loss", &[loss.loss])?;
                opt_c.step(&mut c, &grad);
                critic = critic.unflatten(&c)?;
                last = Some(loss);
            }
            let (z, v) = prior_batch(&mut rng, arch, b);
            let (gen_loss, grad) = generator_loss_gradient(&decoder, &critic, arch, &z, &v)?;
            let grad = grad.flatten();
            guard(STAGE, step, "generator gradient", &grad)?;
            guard(STAGE, step, "generator loss", &[gen_loss])?;
            opt_g.step(&mut w, &grad);
            decoder = decoder.unflatten(&w)?;
            if should_log(cfg, step, total) {
                let l = last.expect("at least one critic step");
                curve.log(STAGE, step, &[l.loss, l.wasserstein, l.gradient_penalty, gen_loss])?;
            }
            Ok(())
        })();
        outcome.map_err(|e| e.at(STAGE, step))?;
    }
    Ok(GanOutcome { decoder, critic, curve })
}

/// Result of inverting the decoder for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEntry {
    /// Position of the sample's environment among the training environments.
    pub env: usize,
    /// Position of the sample within its environment.
    pub index: usize,
    /// Best iterate; absent when the objective became non-finite.
    pub z: Option<Vec<f64>>,
    pub objective_initial: f64,
    pub objective_best: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentTable {
    pub entries: Vec<LatentEntry>,
}

impl LatentTable {
    pub fn flagged(&self) -> usize {
        self.entries.iter().filter(|e| e.z.is_none()).count()
    }

    pub fn retained(&self) -> impl Iterator<Item = (&LatentEntry, &[f64])> {
        self.entries.iter().filter_map(|e| e.z.as_deref().map(|z| (e, z)))
    }
}

/// Adam on the latent-inference objective for one sample, starting at
/// `init`. Returns the best iterate seen (including `init`) and its
/// objective, or `None` for the iterate when the objective went non-finite.
pub fn infer_latent(
    w0: &ParameterSet,
    arch: &ArchitectureConfig,
    truth: &Trajectory,
    v: f64,
    init: &[f64],
    cfg: &TrainConfig,
) -> Result<(Option<Vec<f64>>, f64, f64), TrainError> {
    let mut z = init.to_vec();
    let mut opt = Adam::new(cfg.latent_adam, z.len());
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut initial = f64::NAN;
    for step in 0..=cfg.steps.inference {
        let (obj, grad) = match latent_inference_gradient(&z, w0, arch, truth, v, &cfg.risk) {
            Ok(r) => r,
            Err(LossError::Engine(EngineError::NonFinite { .. })) => return Ok((None, initial, f64::NAN)),
            Err(e) => return Err(e.into()),
        };
        if step == 0 {
            initial = obj;
        }
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok((None, initial, f64::NAN));
        }
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, z.clone()));
        }
        if step < cfg.steps.inference {
            opt.step(&mut z, &grad);
        }
    }
    let (obj, z) = best.expect("at least the initial iterate");
    Ok((Some(z), initial, obj))
}

/// Samples of each training environment that stage 2 inverts.
pub fn inference_subset(train: &[EnvironmentBatch], cfg: &TrainConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, batch) in train.iter().enumerate() {
        let n = cfg
            .steps
            .inference_samples_per_env
            .map_or(batch.len(), |k| k.min(batch.len()));
        out.extend((0..n).map(|i| (e, i)));
    }
    out
}

/// Stage 2a: one latent per selected training sample, from `z = 0`.
pub fn infer_latents(
    w0: &ParameterSet,
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<LatentTable, TrainError> {
    let zero = vec![0.0; arch.d_z];
    let entries = inference_subset(train, cfg)
        .into_iter()
        .map(|(env, index)| {
            let s = &train[env].samples()[index];
            let (z, objective_initial, objective_best) = infer_latent(w0, arch, &s.truth, s.obs.speed, &zero, cfg)?;
            Ok(LatentEntry {
                env,
                index,
                z,
                objective_initial,
                objective_best,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(LatentTable { entries })
}

/// Outcome of stage 2b.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub encoder: ParameterSet,
    pub curve: LossCurve,
    /// Mean over retained samples of `‖Φ(obs) − ẑ‖²` after training.
    pub final_mse: f64,
}

fn latent_regression_value(
    theta: &ParameterSet,
    arch: &ArchitectureConfig,
    obs: &[crate::data::Observation],
    targets: &[f64],
) -> Result<f64, TrainError> {
    let z = encode_batch(theta, arch, obs)?;
    let se: f64 = z
        .iter()
        .flat_map(|l| l.values().iter())
        .zip(targets)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(se / obs.len() as f64)
}

/// Records `mean_i ‖Φ(x_i) − ẑ_i‖²` (optionally IRMv1-scaled) for the rows
/// of `x`. Returns the encoder variables, dummy (if any) and loss.
fn latent_regression_graph(
    g: &mut Graph,
    theta: &ParameterSet,
    arch: &ArchitectureConfig,
    x: &Tensor,
    targets: &[f64],
    with_dummy: bool,
) -> Result<(Vec<Var>, Option<Var>, Var), TrainError> {
    let enc = arch.encoder();
    let b = g.bind(theta)?;
    let layers = enc.layers(&b)?;
    let xv = g.constant(x);
    let z = enc.apply(g, &layers, xv)?;
    let n = x.shape()[0];
    let ones = vec![1.0; targets.len()];
    if with_dummy {
        let (d, r) = dummy_scaled_risk_graph(g, "irm.dummy", z, targets, &ones, n)?;
        Ok((layers.vars(), Some(d), r))
    } else {
        let t = g.constant(&Tensor::matrix(n, arch.d_z, targets.to_vec())?);
        let d = g.sub(z, t)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        let r = g.scale(s, 1.0 / n as f64)?;
        Ok((layers.vars(), None, r))
    }
}

/// Retained training samples with their latent targets, grouped by environment.
fn latent_targets(table: &LatentTable, train: &[EnvironmentBatch]) -> Vec<(Vec<crate::data::Observation>, Vec<f64>)> {
    let mut out = vec![(Vec::new(), Vec::new()); train.len()];
    for (e, z) in table.retained() {
        out[e.env].0.push(train[e.env].samples()[e.index].obs.clone());
        out[e.env].1.extend_from_slice(z);
    }
    out
}

/// Stage 2b: regress an encoder onto the inverted latents.
pub fn pretrain_encoder(
    table: &LatentTable,
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    const STAGE: &str = "pretrain";
    let groups = latent_targets(table, train);
    let obs: Vec<_> = groups.iter().flat_map(|g| g.0.iter().cloned()).collect();
    let targets: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    if obs.is_empty() {
        return Err(TrainError::MissingArtifact {
            stage: STAGE,
            missing: "a latent table with at least one retained sample".into(),
        });
    }
    let mut theta = init_params(&arch.encoder(), cfg.seed);
    let mut flat = theta.flatten();
    let mut opt = Adam::new(cfg.adam, flat.len());
    let mut rng = cfg.rng(2);
    let mut curve = LossCurve::new(&["mse"]);
    let x_all = crate::models::encoder_matrix(arch, &obs)?;
    let width = arch.encoder_input_dim();
    let total = cfg.steps.regression;
    for step in 0..total {
        let outcome = (|| -> Result<(), TrainError> {
            let idx = minibatch(&mut rng, obs.len(), cfg.batch_size);
            let x: Vec<f64> = idx
                .iter()
                .flat_map(|&i| x_all.data()[i * width..(i + 1) * width].iter().copied())
                .collect();
            let t: Vec<f64> = idx
                .iter()
                .flat_map(|&i| targets[i * arch.d_z..(i + 1) * arch.d_z].iter().copied())
                .collect();
            let x = Tensor::matrix(idx.len(), width, x)?;
            let mut g = Graph::new();
            let (vars, _, loss) = latent_regression_graph(&mut g, &theta, arch, &x, &t, false)?;
            let value = g.scalar(loss)?;
            let grad: Vec<f64> = g.gradient(loss, &vars)?.into_iter().flatten().collect();
            guard(STAGE, step, "loss", &[value])?;
            guard(STAGE, step, "gradient", &grad)?;
            opt.step(&mut flat, &grad);
            theta = theta.unflatten(&flat)?;
            if should_log(cfg, step, total) {
                curve.log(STAGE, step, &[value])?;
            }
            Ok(())
        })();
        outcome.map_err(|e| e.at(STAGE, step))?;
    }
    let final_mse = latent_regression_value(&theta, arch, &obs, &targets)?;
    Ok(PretrainOutcome {
        encoder: theta,
        curve,
        final_mse,
    })
}

/// Outcome of a stage that trains encoder (and possibly decoder) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutcome {
    pub encoder: ParameterSet,
    pub decoder: ParameterSet,
    pub curve: LossCurve,
}

fn nirm_training(
    stage: &'static str,
    theta: ParameterSet,
    w: ParameterSet,
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    trainable: Trainable,
    penalized: bool,
    total: usize,
    stream: u64,
) -> Result<JointOutcome, TrainError> {
    let pooled = pool(train)?;
    let mut theta = theta;
    let mut w = w;
    let mut tf = theta.flatten();
    let mut wf = w.flatten();
    let mut opt_t = Adam::new(cfg.adam, tf.len());
    let mut opt_w = Adam::new(cfg.adam, wf.len());
    let mut rng = cfg.rng(stream);
    let mut curve = LossCurve::new(&["objective", "risk", "penalty", "lambda"]);
    for step in 0..total {
        let outcome = (|| -> Result<(), TrainError> {
            let terms = draw_terms(&mut rng, train, &pooled, cfg)?;
            let lambda = if penalized { cfg.lambda_at(step, total) } else { 0.0 };
            let risk_cfg = RiskConfig {
                lambda_irm: lambda,
                ..cfg.risk
            };
            let t = nirm_objective_terms(&theta, &w, &terms, arch, &risk_cfg, trainable, penalized)?;
            guard(stage, step, "objective", &[t.objective])?;
            if let Some(g) = &t.encoder_grad {
                guard(stage, step, "encoder gradient", g)?;
                opt_t.step(&mut tf, g);
                theta = theta.unflatten(&tf)?;
            }
            if let Some(g) = &t.decoder_grad {
                guard(stage, step, "decoder gradient", g)?;
                opt_w.step(&mut wf, g);
                w = w.unflatten(&wf)?;
            }
            if should_log(cfg, step, total) {
                curve.log(stage, step, &[t.objective, t.risk, t.penalty, lambda])?;
            }
            Ok(())
        })();
        outcome.map_err(|e| e.at(stage, step))?;
    }
    Ok(JointOutcome {
        encoder: theta,
        decoder: w,
        curve,
    })
}

/// Stage 3: fine-tune the encoder through the frozen decoder on
/// `Σ_e R^e + λ ‖∇_w R^e‖²`. The decoder is checked to be bit-identical
/// afterwards.
pub fn finetune_encoder_nirm(
    theta0: &ParameterSet,
    w0: &ParameterSet,
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<JointOutcome, TrainError> {
    let before = fingerprint(w0);
    let out = nirm_training(
        "finetune",
        theta0.clone(),
        w0.clone(),
        train,
        arch,
        cfg,
        Trainable::Encoder,
        true,
        cfg.steps.finetune,
        3,
    )?;
    if fingerprint(&out.decoder) != before || fingerprint(w0) != before {
        return Err(TrainError::DecoderChanged("finetune"));
    }
    Ok(out)
}

/// Stage-3 schedule on the risk alone, the reference for the `λ = 0` identity.
pub fn finetune_encoder_erm(
    theta0: &ParameterSet,
    w0: &ParameterSet,
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<JointOutcome, TrainError> {
    nirm_training(
        "finetune",
        theta0.clone(),
        w0.clone(),
        train,
        arch,
        cfg,
        Trainable::Encoder,
        false,
        cfg.steps.finetune,
        3,
    )
}

/// Exact bit pattern of a parameter set.
pub fn fingerprint(p: &ParameterSet) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

/// The linear head of the `traj_irm` baseline.
pub fn trajectory_head(arch: &ArchitectureConfig) -> Mlp {
    Mlp::new("head", arch.d_z, &[], 2 * arch.n_points, Activation::Tanh)
}

/// Records `encode → linear head` in meters for the rows of `x`.
fn trajectory_head_graph(
    g: &mut Graph,
    theta: &ParameterSet,
    head: &ParameterSet,
    arch: &ArchitectureConfig,
    x: &Tensor,
) -> Result<(Vec<Var>, Var), TrainError> {
    let enc = arch.encoder();
    let hm = trajectory_head(arch);
    enc.check(theta)?;
    hm.check(head)?;
    let bt = g.bind(theta)?;
    let bh = g.bind(head)?;
    let el = enc.layers(&bt)?;
    let hl = hm.layers(&bh)?;
    let xv = g.constant(x);
    let z = enc.apply(g, &el, xv)?;
    let y = hm.apply(g, &hl, z)?;
    let y = g.scale(y, arch.output_scale())?;
    let mut vars = el.vars();
    vars.extend(hl.vars());
    Ok((vars, y))
}

/// Mean α-weighted risk of the `traj_irm` predictor on one batch, and its
/// gradient under the IRMv1 penalty of weight `lambda`.
pub fn trajectory_irm_terms(
    theta: &ParameterSet,
    head: &ParameterSet,
    batch: &EnvironmentBatch,
    arch: &ArchitectureConfig,
    alpha: f64,
    lambda: f64,
) -> Result<(f64, f64, Vec<f64>), TrainError> {
    let x = batch.encoder_inputs(arch)?;
    let mut g = Graph::new();
    let (vars, y) = trajectory_head_graph(&mut g, theta, head, arch, &x)?;
    let truth = batch.truth_flat();
    let weights: Vec<f64> = (0..truth.len() / 2).flat_map(|_| [1.0, alpha]).collect();
    let (dummy, r) = dummy_scaled_risk_graph(&mut g, "irm.dummy", y, &truth, &weights, batch.len())?;
    let pg = g.penalized_gradient(r, &[dummy], &vars, lambda)?;
    Ok((g.scalar(r)?, pg.penalty, pg.gradient.into_iter().flatten().collect()))
}

/// A trained model that maps observations to trajectories.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    /// `decode_grid(w, encode(θ, obs), v)`.
    EncoderDecoder {
        encoder: ParameterSet,
        decoder: ParameterSet,
    },
    /// Linear head on the encoder output, emitting the grid points directly.
    TrajectoryHead { encoder: ParameterSet, head: ParameterSet },
}

impl Predictor {
    pub fn predict(&self, arch: &ArchitectureConfig, samples: &[Sample]) -> Result<Vec<Trajectory>, TrainError> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let obs: Vec<_> = samples.iter().map(|s| s.obs.clone()).collect();
        match self {
            Predictor::EncoderDecoder { encoder, decoder } => {
                let z = encode_batch(encoder, arch, &obs)?;
                let v: Vec<f64> = obs.iter().map(|o| o.speed).collect();
                Ok(decode_grid_batch(decoder, arch, &z, &v)?)
            }
            Predictor::TrajectoryHead { encoder, head } => {
                let x = crate::models::encoder_matrix(arch, &obs)?;
                let mut g = Graph::new();
                let (_, y) = trajectory_head_graph(&mut g, encoder, head, arch, &x)?;
                let times = arch.times();
                Ok(g.value(y)
                    .chunks_exact(2 * arch.n_points)
                    .zip(&obs)
                    .map(|(c, o)| Trajectory::from_flat(&times, c, o.speed))
                    .collect())
            }
        }
    }

    /// Rebuilds a predictor from role-named parameter sets as listed by
    /// [`Predictor::parts`]. `None` when the roles do not form a model.
    pub fn from_parts<'a>(parts: impl IntoIterator<Item = (&'a str, &'a ParameterSet)>) -> Option<Self> {
        let (mut encoder, mut decoder, mut head) = (None, None, None);
        for (role, p) in parts {
            let slot = match role {
                "encoder" => &mut encoder,
                "decoder" => &mut decoder,
                "head" => &mut head,
                _ => return None,
            };
            if slot.replace(p.clone()).is_some() {
                return None;
            }
        }
        match (encoder?, decoder, head) {
            (encoder, Some(decoder), None) => Some(Predictor::EncoderDecoder { encoder, decoder }),
            (encoder, None, Some(head)) => Some(Predictor::TrajectoryHead { encoder, head }),
            _ => None,
        }
    }

    /// Named parameter sets making up the model.
    pub fn parts(&self) -> Vec<(&'static str, &ParameterSet)> {
        match self {
            Predictor::EncoderDecoder { encoder, decoder } => vec![("encoder", encoder), ("decoder", decoder)],
            Predictor::TrajectoryHead { encoder, head } => vec![("encoder", encoder), ("head", head)],
        }
    }
}

/// Stages whose results a [`StageStore`] can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gan,
    Inference,
    Pretrain,
    Finetune,
    Joint,
    LatentIrm,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gan => "gan",
            Stage::Inference => "inference",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Joint => "joint",
            Stage::LatentIrm => "latent_irm",
        }
    }
}

/// Everything a finished stage produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageResult {
    /// Role → parameters, e.g. `decoder`, `critic`, `encoder`, `head`.
    pub params: Vec<(String, ParameterSet)>,
    pub curve: LossCurve,
    pub latents: Option<LatentTable>,
    /// Scalar facts worth reporting, e.g. final regression error.
    pub summary: Vec<(String, f64)>,
}

impl StageResult {
    pub fn param(&self, role: &str) -> Option<&ParameterSet> {
        self.params.iter().find(|(r, _)| r == role).map(|(_, p)| p)
    }

    fn require(&self, stage: Stage, role: &str) -> Result<&ParameterSet, TrainError> {
        self.param(role).ok_or_else(|| TrainError::MissingArtifact {
            stage: stage.name(),
            missing: format!("`{role}` parameters"),
        })
    }
}

/// Persistence hook for stage results. `load` returning `Some` skips the stage.
pub trait StageStore {
    fn load(&mut self, stage: Stage) -> Result<Option<StageResult>, TrainError>;
    fn save(&mut self, stage: Stage, result: &StageResult) -> Result<(), TrainError>;
}

/// Keeps nothing; every stage runs.
#[derive(Debug, Default)]
pub struct NoStore;

impl StageStore for NoStore {
    fn load(&mut self, _: Stage) -> Result<Option<StageResult>, TrainError> {
        Ok(None)
    }

    fn save(&mut self, _: Stage, _: &StageResult) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Called before a stage starts; lets callers report progress.
pub type StageObserver<'a> = Box<dyn FnMut(Variant, Stage) + 'a>;

/// A completed variant run.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub predictor: Predictor,
    /// Every stage in execution order with its result.
    pub stages: Vec<(Stage, StageResult)>,
}

fn run_stage(
    store: &mut dyn StageStore,
    stage: Stage,
    run: impl FnOnce() -> Result<StageResult, TrainError>,
) -> Result<StageResult, TrainError> {
    if let Some(r) = store.load(stage)? {
        return Ok(r);
    }
    let r = run()?;
    store.save(stage, &r)?;
    Ok(r)
}

fn gan_stage(
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<StageResult, TrainError> {
    let o = train_decoder_gan(train, arch, cfg)?;
    Ok(StageResult {
        params: vec![("decoder".into(), o.decoder), ("critic".into(), o.critic)],
        curve: o.curve,
        ..StageResult::default()
    })
}

fn inference_stage(
    w0: &ParameterSet,
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<StageResult, TrainError> {
    let table = infer_latents(w0, train, arch, cfg)?;
    let kept: Vec<&LatentEntry> = table.entries.iter().filter(|e| e.z.is_some()).collect();
    let mean = |f: fn(&LatentEntry) -> f64| kept.iter().map(|e| f(e)).sum::<f64>() / kept.len().max(1) as f64;
    let summary = vec![
        ("samples".into(), table.entries.len() as f64),
        ("flagged".into(), table.flagged() as f64),
        ("mean_objective_initial".into(), mean(|e| e.objective_initial)),
        ("mean_objective_best".into(), mean(|e| e.objective_best)),
    ];
    Ok(StageResult {
        latents: Some(table),
        summary,
        ..StageResult::default()
    })
}

/// Stages 1 and 2, shared by `ours` and `latent_irmv1`.
fn pretrained_stages(
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    store: &mut dyn StageStore,
    observe: &mut dyn FnMut(Stage),
) -> Result<Vec<(Stage, StageResult)>, TrainError> {
    observe(Stage::Gan);
    let gan = run_stage(store, Stage::Gan, || gan_stage(train, arch, cfg))?;
    let w0 = gan.require(Stage::Inference, "decoder")?.clone();
    observe(Stage::Inference);
    let inf = run_stage(store, Stage::Inference, || inference_stage(&w0, train, arch, cfg))?;
    let table = inf.latents.clone().ok_or_else(|| TrainError::MissingArtifact {
        stage: Stage::Pretrain.name(),
        missing: "a latent table".into(),
    })?;
    observe(Stage::Pretrain);
    let pre = run_stage(store, Stage::Pretrain, || {
        let o = pretrain_encoder(&table, train, arch, cfg)?;
        Ok(StageResult {
            params: vec![("encoder".into(), o.encoder)],
            curve: o.curve,
            summary: vec![("final_mse".into(), o.final_mse)],
            ..StageResult::default()
        })
    })?;
    Ok(vec![(Stage::Gan, gan), (Stage::Inference, inf), (Stage::Pretrain, pre)])
}

fn joint_result(o: JointOutcome) -> StageResult {
    StageResult {
        params: vec![("encoder".into(), o.encoder), ("decoder".into(), o.decoder)],
        curve: o.curve,
        ..StageResult::default()
    }
}

/// `latent_irmv1` head stage: continue from θ0 on the latent regression
/// with the IRMv1 penalty on a scalar multiplier of the encoder output.
pub fn train_latent_irmv1(
    theta0: &ParameterSet,
    table: &LatentTable,
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<(ParameterSet, LossCurve), TrainError> {
    const STAGE: &str = "latent_irm";
    let groups: Vec<_> = latent_targets(table, train)
        .into_iter()
        .filter(|g| !g.0.is_empty())
        .collect();
    if groups.is_empty() {
        return Err(TrainError::MissingArtifact {
            stage: STAGE,
            missing: "a latent table with at least one retained sample".into(),
        });
    }
    let mut theta = theta0.clone();
    let mut flat = theta.flatten();
    let mut opt = Adam::new(cfg.adam, flat.len());
    let mut rng = cfg.rng(5);
    let mut curve = LossCurve::new(&["objective", "risk", "penalty", "lambda"]);
    let total = cfg.steps.finetune;
    let width = arch.encoder_input_dim();
    let matrices: Vec<Tensor> = groups
        .iter()
        .map(|g| crate::models::encoder_matrix(arch, &g.0))
        .collect::<Result<_, _>>()?;
    let pooled_x: Vec<f64> = matrices.iter().flat_map(|m| m.data().iter().copied()).collect();
    let pooled_t: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let pooled_n = pooled_t.len() / arch.d_z;
    for step in 0..total {
        let outcome = (|| -> Result<(), TrainError> {
            let lambda = cfg.lambda_at(step, total);
            let mut terms: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
            match cfg.environment_mode {
                EnvironmentMode::Labeled => {
                    for (m, g) in matrices.iter().zip(&groups) {
                        let idx = minibatch(&mut rng, g.0.len(), cfg.batch_size);
                        let x = idx
                            .iter()
                            .flat_map(|&i| m.data()[i * width..(i + 1) * width].iter().copied())
                            .collect();
                        let t = idx
                            .iter()
                            .flat_map(|&i| g.1[i * arch.d_z..(i + 1) * arch.d_z].iter().copied())
                            .collect();
                        terms.push((x, t, idx.len()));
                    }
                }
                EnvironmentMode::LabelFree => {
                    for _ in 0..groups.len() {
                        let idx = minibatch(&mut rng, pooled_n, cfg.batch_size);
                        let x = idx
                            .iter()
                            .flat_map(|&i| pooled_x[i * width..(i + 1) * width].iter().copied())
                            .collect();
                        let t = idx
                            .iter()
                            .flat_map(|&i| pooled_t[i * arch.d_z..(i + 1) * arch.d_z].iter().copied())
                            .collect();
                        terms.push((x, t, idx.len()));
                    }
                }
            }
            let (mut risk, mut penalty) = (0.0, 0.0);
            let mut grad = vec![0.0; flat.len()];
            for (x, t, n) in terms {
                let x = Tensor::matrix(n, width, x)?;
                let mut g = Graph::new();
                let (vars, dummy, loss) = latent_regression_graph(&mut g, &theta, arch, &x, &t, true)?;
                let pg = g.penalized_gradient(loss, &[dummy.expect("dummy requested")], &vars, lambda)?;
                risk += g.scalar(loss)?;
                penalty += pg.penalty;
                grad.iter_mut()
                    .zip(pg.gradient.iter().flatten())
                    .for_each(|(a, b)| *a += b);
            }
            let objective = risk + lambda * penalty;
            guard(STAGE, step, "objective", &[objective])?;
            guard(STAGE, step, "gradient", &grad)?;
            opt.step(&mut flat, &grad);
            theta = theta.unflatten(&flat)?;
            if should_log(cfg, step, total) {
                curve.log(STAGE, step, &[objective, risk, penalty, lambda])?;
            }
            Ok(())
        })();
        outcome.map_err(|e| e.at(STAGE, step))?;
    }
    Ok((theta, curve))
}

/// `traj_irm`: encoder plus linear point head trained with the IRMv1 penalty.
pub fn train_trajectory_irm(
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<(ParameterSet, ParameterSet, LossCurve), TrainError> {
    const STAGE: &str = "joint";
    let pooled = pool(train)?;
    let mut theta = init_params(&arch.encoder(), cfg.seed);
    let mut head = init_params(&trajectory_head(arch), cfg.seed);
    let split = theta.num_values();
    let mut flat = theta.flatten();
    flat.extend(head.flatten());
    let mut opt = Adam::new(cfg.adam, flat.len());
    let mut rng = cfg.rng(4);
    let mut curve = LossCurve::new(&["objective", "risk", "penalty", "lambda"]);
    let total = cfg.steps.joint;
    for step in 0..total {
        let outcome = (|| -> Result<(), TrainError> {
            let lambda = cfg.lambda_at(step, total);
            let terms = draw_terms(&mut rng, train, &pooled, cfg)?;
            let (mut risk, mut penalty) = (0.0, 0.0);
            let mut grad = vec![0.0; flat.len()];
            for b in &terms {
                let (r, p, g) = trajectory_irm_terms(&theta, &head, b, arch, cfg.risk.alpha, lambda)?;
                risk += r;
                penalty += p;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let objective = risk + lambda * penalty;
            guard(STAGE, step, "objective", &[objective])?;
            guard(STAGE, step, "gradient", &grad)?;
            opt.step(&mut flat, &grad);
            theta = theta.unflatten(&flat[..split])?;
            head = head.unflatten(&flat[split..])?;
            if should_log(cfg, step, total) {
                curve.log(STAGE, step, &[objective, risk, penalty, lambda])?;
            }
            Ok(())
        })();
        outcome.map_err(|e| e.at(STAGE, step))?;
    }
    Ok((theta, head, curve))
}

/// Trains `cfg.variant` on the training environments.
pub fn train_variant(
    train: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    store: &mut dyn StageStore,
    mut observe: Option<StageObserver<'_>>,
) -> Result<VariantOutcome, TrainError> {
    cfg.validate()?;
    arch.validate()?;
    if train.is_empty() {
        return Err(TrainError::MissingArtifact {
            stage: "training",
            missing: "at least one training environment".into(),
        });
    }
    let variant = cfg.variant;
    let mut notify = |s: Stage| {
        if let Some(f) = observe.as_mut() {
            f(variant, s);
        }
    };
    let mut stages = Vec::new();
    let predictor = match variant {
        Variant::Ours => {
            stages = pretrained_stages(train, arch, cfg, store, &mut notify)?;
            let w0 = stages[0].1.require(Stage::Finetune, "decoder")?.clone();
            let theta0 = stages[2].1.require(Stage::Finetune, "encoder")?.clone();
            notify(Stage::Finetune);
            let fin = run_stage(store, Stage::Finetune, || {
                finetune_encoder_nirm(&theta0, &w0, train, arch, cfg).map(joint_result)
            })?;
            let encoder = fin.require(Stage::Finetune, "encoder")?.clone();
            stages.push((Stage::Finetune, fin));
            Predictor::EncoderDecoder { encoder, decoder: w0 }
        }
        Variant::LatentIrmv1 => {
            stages = pretrained_stages(train, arch, cfg, store, &mut notify)?;
            let w0 = stages[0].1.require(Stage::LatentIrm, "decoder")?.clone();
            let table = stages[1].1.latents.clone().ok_or_else(|| TrainError::MissingArtifact {
                stage: Stage::LatentIrm.name(),
                missing: "a latent table".into(),
            })?;
            let theta0 = stages[2].1.require(Stage::LatentIrm, "encoder")?.clone();
            notify(Stage::LatentIrm);
            let st = run_stage(store, Stage::LatentIrm, || {
                let (encoder, curve) = train_latent_irmv1(&theta0, &table, train, arch, cfg)?;
                Ok(StageResult {
                    params: vec![("encoder".into(), encoder), ("decoder".into(), w0.clone())],
                    curve,
                    ..StageResult::default()
                })
            })?;
            let encoder = st.require(Stage::LatentIrm, "encoder")?.clone();
            stages.push((Stage::LatentIrm, st));
            Predictor::EncoderDecoder { encoder, decoder: w0 }
        }
        Variant::RandomNtNirm => {
            let w_rand = init_params(&arch.decoder(), cfg.seed);
            let theta = init_params(&arch.encoder(), cfg.seed);
            notify(Stage::Finetune);
            let fin = run_stage(store, Stage::Finetune, || {
                finetune_encoder_nirm(&theta, &w_rand, train, arch, cfg).map(joint_result)
            })?;
            let encoder = fin.require(Stage::Finetune, "encoder")?.clone();
            stages.push((Stage::Finetune, fin));
            Predictor::EncoderDecoder {
                encoder,
                decoder: w_rand,
            }
        }
        Variant::E2eNt | Variant::E2eNtNirm => {
            let penalized = variant == Variant::E2eNtNirm;
            notify(Stage::Joint);
            let st = run_stage(store, Stage::Joint, || {
                nirm_training(
                    "joint",
                    init_params(&arch.encoder(), cfg.seed),
                    init_params(&arch.decoder(), cfg.seed),
                    train,
                    arch,
                    cfg,
                    Trainable::Both,
                    penalized,
                    cfg.steps.joint,
                    6,
                )
                .map(joint_result)
            })?;
            let encoder = st.require(Stage::Joint, "encoder")?.clone();
            let decoder = st.require(Stage::Joint, "decoder")?.clone();
            stages.push((Stage::Joint, st));
            Predictor::EncoderDecoder { encoder, decoder }
        }
        Variant::TrajIrm => {
            notify(Stage::Joint);
            let st = run_stage(store, Stage::Joint, || {
                let (encoder, head, curve) = train_trajectory_irm(train, arch, cfg)?;
                Ok(StageResult {
                    params: vec![("encoder".into(), encoder), ("head".into(), head)],
                    curve,
                    ..StageResult::default()
                })
            })?;
            let encoder = st.require(Stage::Joint, "encoder")?.clone();
            let head = st.require(Stage::Joint, "head")?.clone();
            stages.push((Stage::Joint, st));
            Predictor::TrajectoryHead { encoder, head }
        }
    };
    Ok(VariantOutcome {
        variant,
        predictor,
        stages,
    })
}
