//! Training objectives: the α-weighted trajectory risk, ERM, the IRMv1 and
//! non-linear IRM gradient-norm penalties, WGAN-GP, and latent inference.
//!
//! Each objective has a value-level form for checking and a graph-level form
//! that training uses to obtain gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::engine::{EngineError, Graph, Var};
use crate::models::{decoder_graph, encoder_matrix, ArchitectureConfig, Layers, ModelError, Trajectory};
use crate::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trajectories are not on the same time grid")]
    GridMismatch,
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("sample with environment {found} in batch labelled {expected}")]
    MixedEnvironments { expected: u32, found: u32 },
    #[error("{0}")]
    Config(String),
}

impl From<crate::tensor::TensorError> for LossError {
    fn from(e: crate::tensor::TensorError) -> Self {
        LossError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    /// Weight of the lateral error relative to the longitudinal error.
    pub alpha: f64,
    /// Penalty weight λ.
    pub lambda_irm: f64,
    /// Latent norm weight λ₂.
    pub lambda_z: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            lambda_irm: 1.0,
            lambda_z: 1e-3,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LossError::Config(format!("alpha = {} must be positive", self.alpha)));
        }
        if !(self.lambda_irm >= 0.0 && self.lambda_irm.is_finite()) {
            return Err(LossError::Config(format!(
                "lambda_irm = {} must be >= 0",
                self.lambda_irm
            )));
        }
        if !(self.lambda_z >= 0.0 && self.lambda_z.is_finite()) {
            return Err(LossError::Config(format!("lambda_z = {} must be >= 0", self.lambda_z)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub obs: Observation,
    pub truth: Trajectory,
}

/// What a batch's penalty term is summed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvTag {
    /// An explicit environment label shared by every sample.
    Label(u32),
    /// Label-free mode: one minibatch stands in for one environment.
    Minibatch(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentBatch {
    tag: EnvTag,
    samples: Vec<Sample>,
}

impl EnvironmentBatch {
    pub fn new(tag: EnvTag, samples: Vec<Sample>) -> Result<Self, LossError> {
        if samples.is_empty() {
            return Err(LossError::Empty("environment batch"));
        }
        if let EnvTag::Label(id) = tag {
            if let Some(s) = samples.iter().find(|s| s.obs.environment_id != id) {
                return Err(LossError::MixedEnvironments {
                    expected: id,
                    found: s.obs.environment_id,
                });
            }
        }
        Ok(Self { tag, samples })
    }

    pub fn tag(&self) -> EnvTag {
        self.tag
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The samples at `index`, keeping the tag.
    pub fn select(&self, index: &[usize]) -> Result<Self, LossError> {
        Self::new(self.tag, index.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.obs.speed).collect()
    }

    /// Interleaved ground-truth coordinates, sample-major.
    pub fn truth_flat(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.truth.flat()).collect()
    }

    pub fn encoder_inputs(&self, arch: &ArchitectureConfig) -> Result<Tensor, ModelError> {
        encoder_matrix(arch, self.samples.iter().map(|s| &s.obs))
    }
}

/// Sum over grid points of squared longitudinal error plus α times squared
/// lateral error.
pub fn risk(predicted: &Trajectory, truth: &Trajectory, cfg: &RiskConfig) -> Result<f64, LossError> {
    if !predicted.same_grid(truth) {
        return Err(LossError::GridMismatch);
    }
    Ok(predicted
        .points
        .iter()
        .zip(&truth.points)
        .map(|(p, t)| {
            let dl = p.longitudinal - t.longitudinal;
            let dt = p.lateral - t.lateral;
            dl * dl + cfg.alpha * dt * dt
        })
        .sum())
}

/// Per-coordinate weights `(1, α)` for `rows` interleaved points.
fn risk_weights(rows: usize, alpha: f64) -> Vec<f64> {
    (0..rows).flat_map(|_| [1.0, alpha]).collect()
}

/// Records `Σ w ∘ (pred − truth)²` for a `rows × 2` prediction, divided by `samples`.
pub fn weighted_risk_graph(
    g: &mut Graph,
    pred: Var,
    truth_flat: &[f64],
    alpha: f64,
    samples: usize,
) -> Result<Var, EngineError> {
    let shape = g.shape(pred).to_vec();
    let t = g.constant(
        &Tensor::new(shape.clone(), truth_flat.to_vec()).map_err(|e| EngineError::Shape {
            op: "constant",
            node: g.len(),
            detail: format!("{e}"),
        })?,
    );
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    let rows = truth_flat.len() / 2;
    let wt = g.constant(&Tensor::new(shape, risk_weights(rows, alpha)).expect("same length as truth"));
    let wsq = g.mul(sq, wt)?;
    let total = g.sum(wsq)?;
    g.scale(total, 1.0 / samples as f64)
}

/// Graph variables of an encoder→decoder program over one batch.
#[derive(Debug, Clone)]
pub struct EncoderDecoderGraph {
    pub graph: Graph,
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    /// Mean per-sample risk of the batch.
    pub risk: Var,
}

/// Records the mean risk of `decode_grid(w, encode(θ, obs), v)` over a batch.
pub fn encoder_decoder_graph(
    theta: &ParameterSet,
    w: &ParameterSet,
    batch: &EnvironmentBatch,
    arch: &ArchitectureConfig,
    alpha: f64,
) -> Result<EncoderDecoderGraph, LossError> {
    let enc = arch.encoder();
    let dec = arch.decoder();
    enc.check(theta)?;
    dec.check(w)?;
    let x = batch.encoder_inputs(arch)?;
    let mut g = Graph::new();
    let bw = g.bind(w)?;
    let bt = g.bind(theta)?;
    let dl = dec.layers(&bw)?;
    let el = enc.layers(&bt)?;
    let xv = g.constant(&x);
    let z = enc.apply(&mut g, &el, xv)?;
    let pred = decoder_graph(&mut g, arch, &dl, z, &batch.speeds(), &arch.times())?;
    let risk = weighted_risk_graph(&mut g, pred, &batch.truth_flat(), alpha, batch.len())?;
    Ok(EncoderDecoderGraph {
        graph: g,
        encoder: el.vars(),
        decoder: dl.vars(),
        risk,
    })
}

fn check_batches(batches: &[EnvironmentBatch]) -> Result<(), LossError> {
    if batches.is_empty() {
        return Err(LossError::Empty("batch list"));
    }
    Ok(())
}

/// Mean over every sample of every batch of the encoder→decoder risk.
pub fn erm_objective(
    theta: &ParameterSet,
    w: &ParameterSet,
    batches: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &RiskConfig,
) -> Result<f64, LossError> {
    check_batches(batches)?;
    let mut total = 0.0;
    let mut count = 0;
    for b in batches {
        let r = encoder_decoder_graph(theta, w, b, arch, cfg.alpha)?;
        total += r.graph.scalar(r.risk)? * b.len() as f64;
        count += b.len();
    }
    Ok(total / count as f64)
}

/// `‖∇_w R^e‖²` at the supplied decoder parameters.
pub fn nirm_penalty(
    theta: &ParameterSet,
    w0: &ParameterSet,
    batch: &EnvironmentBatch,
    arch: &ArchitectureConfig,
    cfg: &RiskConfig,
) -> Result<f64, LossError> {
    let r = encoder_decoder_graph(theta, w0, batch, arch, cfg.alpha)?;
    let gw = r.graph.gradient(r.risk, &r.decoder)?;
    Ok(gw.iter().flatten().map(|v| v * v).sum())
}

/// `Σ_e (R^e + λ ‖∇_w R^e‖²)`. With `λ = 0` this is the sum of the
/// per-environment mean risks, i.e. `erm_objective` times the number of
/// environments when all batches have equal size.
pub fn nirm_objective(
    theta: &ParameterSet,
    w0: &ParameterSet,
    batches: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &RiskConfig,
) -> Result<f64, LossError> {
    check_batches(batches)?;
    let mut total = 0.0;
    for b in batches {
        let r = encoder_decoder_graph(theta, w0, b, arch, cfg.alpha)?;
        let risk = r.graph.scalar(r.risk)?;
        let gw = r.graph.gradient(r.risk, &r.decoder)?;
        let pen: f64 = gw.iter().flatten().map(|v| v * v).sum();
        total += risk + cfg.lambda_irm * pen;
    }
    Ok(total)
}

/// Objective value, its parts and gradients, summed over environments.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerms {
    pub objective: f64,
    pub risk: f64,
    pub penalty: f64,
    /// Flat gradients in parameter-set order; `None` when not requested.
    pub encoder_grad: Option<Vec<f64>>,
    pub decoder_grad: Option<Vec<f64>>,
}

/// Which parameters a gradient-based update moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Encoder,
    Decoder,
    Both,
}

impl Trainable {
    fn encoder(self) -> bool {
        matches!(self, Trainable::Encoder | Trainable::Both)
    }

    fn decoder(self) -> bool {
        matches!(self, Trainable::Decoder | Trainable::Both)
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

/// Value and gradient of `Σ_e (R^e + λ ‖∇_w R^e‖²)` with respect to the
/// trainable parameters. With `penalized = false` the penalty is neither
/// computed nor differentiated, giving the plain risk-sum objective.
pub fn nirm_objective_terms(
    theta: &ParameterSet,
    w: &ParameterSet,
    batches: &[EnvironmentBatch],
    arch: &ArchitectureConfig,
    cfg: &RiskConfig,
    trainable: Trainable,
    penalized: bool,
) -> Result<ObjectiveTerms, LossError> {
    check_batches(batches)?;
    let mut out = ObjectiveTerms {
        objective: 0.0,
        risk: 0.0,
        penalty: 0.0,
        encoder_grad: None,
        decoder_grad: None,
    };
    for b in batches {
        let r = encoder_decoder_graph(theta, w, b, arch, cfg.alpha)?;
        let mut outer = Vec::new();
        if trainable.encoder() {
            outer.extend_from_slice(&r.encoder);
        }
        if trainable.decoder() {
            outer.extend_from_slice(&r.decoder);
        }
        let risk = r.graph.scalar(r.risk)?;
        let (penalty, grads) = if penalized {
            let pg = r.graph.penalized_gradient(r.risk, &r.decoder, &outer, cfg.lambda_irm)?;
            (pg.penalty, pg.gradient)
        } else {
            (0.0, r.graph.gradient(r.risk, &outer)?)
        };
        out.risk += risk;
        out.penalty += penalty;
        out.objective += risk + cfg.lambda_irm * penalty;
        let split = if trainable.encoder() { r.encoder.len() } else { 0 };
        let (eg, dg) = grads.split_at(split);
        if trainable.encoder() {
            add_into(&mut out.encoder_grad, eg.iter().flatten().copied().collect());
        }
        if trainable.decoder() {
            add_into(&mut out.decoder_grad, dg.iter().flatten().copied().collect());
        }
    }
    Ok(out)
}

/// Records `R(g) = mean_i Σ w ∘ (g·pred − target)²` with a scalar dummy `g`
/// declared as the graph input `name` at 1.0. Returns `(g, R)`.
pub fn dummy_scaled_risk_graph(
    g: &mut Graph,
    name: &str,
    pred: Var,
    target_flat: &[f64],
    weights: &[f64],
    samples: usize,
) -> Result<(Var, Var), EngineError> {
    let dummy = g.input(name, &Tensor::scalar(1.0))?;
    let scaled = g.scale_by(pred, dummy)?;
    let shape = g.shape(pred).to_vec();
    let bad = |e: crate::tensor::TensorError, node| EngineError::Shape {
        op: "constant",
        node,
        detail: format!("{e}"),
    };
    let t = Tensor::new(shape.clone(), target_flat.to_vec()).map_err(|e| bad(e, g.len()))?;
    let t = g.constant(&t);
    let wt = Tensor::new(shape, weights.to_vec()).map_err(|e| bad(e, g.len()))?;
    let wt = g.constant(&wt);
    let d = g.sub(scaled, t)?;
    let sq = g.square(d)?;
    let wsq = g.mul(sq, wt)?;
    let total = g.sum(wsq)?;
    let r = g.scale(total, 1.0 / samples as f64)?;
    Ok((dummy, r))
}

/// `(dR/dg)²` at `g = 1` for `R(g) = Σ_i weight_i (g·φ_i − y_i)²`, computed by
/// differentiating through the dummy scale. Weights default to 1.
pub fn irmv1_penalty(predictions: &[f64], truths: &[f64], weights: Option<&[f64]>) -> Result<f64, LossError> {
    if predictions.is_empty() {
        return Err(LossError::Empty("predictions"));
    }
    if predictions.len() != truths.len() || weights.is_some_and(|w| w.len() != predictions.len()) {
        return Err(LossError::GridMismatch);
    }
    let ones;
    let weights = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0; predictions.len()];
            &ones
        }
    };
    let mut g = Graph::new();
    let p = g.constant(&Tensor::vector(predictions.to_vec()));
    let (dummy, r) = dummy_scaled_risk_graph(&mut g, "dummy", p, truths, weights, 1)?;
    let d = g.gradient(r, &[dummy])?;
    Ok(d[0][0] * d[0][0])
}

/// Critic input rows `[flattened trajectory, speed]` for a batch.
pub fn critic_rows(arch: &ArchitectureConfig, trajs: &[Trajectory]) -> Result<Tensor, LossError> {
    let mut data = Vec::with_capacity(trajs.len() * arch.critic_input_dim());
    for t in trajs {
        data.extend(crate::models::critic_row(arch, &t.flat(), t.condition_speed)?);
    }
    Ok(Tensor::matrix(trajs.len(), arch.critic_input_dim(), data)?)
}

/// Value and parameter gradient of a critic objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticLoss {
    pub loss: f64,
    /// `mean D(fake) − mean D(real)`.
    pub wasserstein: f64,
    /// `mean (‖∇_x D(x̂)‖ − 1)²` before weighting.
    pub gradient_penalty: f64,
    pub gradient: ParameterSet,
}

fn critic_batch_graph(
    critic: &ParameterSet,
    arch: &ArchitectureConfig,
    rows: &Tensor,
    rows_as_input: bool,
) -> Result<(Graph, Layers, Var, Var), LossError> {
    let mlp = arch.critic();
    mlp.check(critic)?;
    if rows.shape().len() != 2 || rows.shape()[1] != arch.critic_input_dim() {
        return Err(ModelError::Dimension {
            what: "critic input width",
            expected: arch.critic_input_dim(),
            got: rows.shape().get(1).copied().unwrap_or(0),
        }
        .into());
    }
    let mut g = Graph::new();
    let b = g.bind(critic)?;
    let layers = mlp.layers(&b)?;
    let x = if rows_as_input {
        g.input("critic.x", rows)?
    } else {
        g.constant(rows)
    };
    let s = mlp.apply(&mut g, &layers, x)?;
    Ok((g, layers, x, s))
}

/// Gradient-penalty term `mean_i (‖∇_x D(x_i)‖ − 1)²` and, when requested,
/// its gradient with respect to the critic parameters scaled by `weight`.
pub fn gradient_penalty(
    critic: &ParameterSet,
    arch: &ArchitectureConfig,
    points: &Tensor,
    weight: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    let (mut g, layers, x, s) = critic_batch_graph(critic, arch, points, true)?;
    let t = g.sum(s)?;
    let n = points.shape()[0];
    let width = arch.critic_input_dim();
    let gx = g.gradient(t, &[x])?.remove(0);
    let mut term = 0.0;
    let mut direction = vec![0.0; gx.len()];
    for (row, d) in gx.chunks_exact(width).zip(direction.chunks_exact_mut(width)) {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
        term += (norm - 1.0) * (norm - 1.0);
        if norm > 0.0 {
            let c = weight / n as f64 * 2.0 * (norm - 1.0) / norm;
            d.iter_mut().zip(row).for_each(|(o, v)| *o = c * v);
        }
    }
    let params = layers.vars();
    let m = g.mixed_directional(t, None, &[x], &[&direction], &params)?;
    Ok((term / n as f64, m.hessian_direction.into_iter().flatten().collect()))
}

fn mean_score_gradient(
    critic: &ParameterSet,
    arch: &ArchitectureConfig,
    rows: &Tensor,
    sign: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    let (mut g, layers, _, s) = critic_batch_graph(critic, arch, rows, false)?;
    let m = g.mean(s)?;
    let m = g.scale(m, sign)?;
    let grads = g.gradient(m, &layers.vars())?;
    Ok((g.scalar(m)?, grads.into_iter().flatten().collect()))
}

/// `x̂_i = ε_i·real_i + (1 − ε_i)·fake_i`.
pub fn interpolate_rows(real: &Tensor, fake: &Tensor, mix: &[f64]) -> Result<Tensor, LossError> {
    if real.shape() != fake.shape() || real.shape()[0] != mix.len() {
        return Err(LossError::Config(format!(
            "real {:?}, fake {:?} and {} mixing weights do not line up",
            real.shape(),
            fake.shape(),
            mix.len()
        )));
    }
    let width = real.shape()[1];
    let data = real
        .data()
        .chunks_exact(width)
        .zip(fake.data().chunks_exact(width))
        .zip(mix)
        .flat_map(|((r, f), &e)| r.iter().zip(f).map(move |(a, b)| e * a + (1.0 - e) * b))
        .collect();
    Ok(Tensor::matrix(real.shape()[0], width, data)?)
}

/// WGAN-GP critic objective on critic input rows, with interpolation
/// weights `mix` supplied by the caller (uniform on [0, 1] in training).
pub fn wgan_critic_loss(
    critic: &ParameterSet,
    arch: &ArchitectureConfig,
    real: &Tensor,
    fake: &Tensor,
    mix: &[f64],
    gp_weight: f64,
) -> Result<CriticLoss, LossError> {
    if real.shape().first().copied().unwrap_or(0) == 0 {
        return Err(LossError::Empty("critic batch"));
    }
    let points = interpolate_rows(real, fake, mix)?;
    let (fake_mean, mut grad) = mean_score_gradient(critic, arch, fake, 1.0)?;
    let (neg_real_mean, gr) = mean_score_gradient(critic, arch, real, -1.0)?;
    let (gp, gg) = gradient_penalty(critic, arch, &points, gp_weight)?;
    grad.iter_mut()
        .zip(gr.iter().zip(&gg))
        .for_each(|(a, (b, c))| *a += b + c);
    let wasserstein = fake_mean + neg_real_mean;
    Ok(CriticLoss {
        loss: wasserstein + gp_weight * gp,
        wasserstein,
        gradient_penalty: gp,
        gradient: critic.unflatten(&grad)?,
    })
}

/// `−mean D(fake)` on critic input rows.
pub fn wgan_generator_loss(critic: &ParameterSet, arch: &ArchitectureConfig, fake: &Tensor) -> Result<f64, LossError> {
    if fake.shape().first().copied().unwrap_or(0) == 0 {
        return Err(LossError::Empty("generator batch"));
    }
    Ok(mean_score_gradient(critic, arch, fake, -1.0)?.0)
}

/// `−mean D(G(z_i, v_i))` and its gradient with respect to the decoder.
pub fn generator_loss_gradient(
    w: &ParameterSet,
    critic: &ParameterSet,
    arch: &ArchitectureConfig,
    z: &Tensor,
    speeds: &[f64],
) -> Result<(f64, ParameterSet), LossError> {
    let b = speeds.len();
    if b == 0 {
        return Err(LossError::Empty("generator batch"));
    }
    let dec = arch.decoder();
    let cm = arch.critic();
    dec.check(w)?;
    cm.check(critic)?;
    let mut g = Graph::new();
    let bw = g.bind(w)?;
    let bc = g.bind(critic)?;
    let dl = dec.layers(&bw)?;
    let cl = cm.layers(&bc)?;
    let zv = g.constant(z);
    let y = decoder_graph(&mut g, arch, &dl, zv, speeds, &arch.times())?;
    let y = g.reshape(y, &[b, 2 * arch.n_points])?;
    let v = g.constant_matrix(b, 1, speeds.to_vec())?;
    let x = g.concat_cols(&[y, v])?;
    let s = cm.apply(&mut g, &cl, x)?;
    let m = g.mean(s)?;
    let loss = g.scale(m, -1.0)?;
    let grads = g.gradient(loss, &dl.vars())?;
    let flat: Vec<f64> = grads.into_iter().flatten().collect();
    Ok((g.scalar(loss)?, w.unflatten(&flat)?))
}

/// Graph of `risk(decode_grid(w0, z, v), truth)` for a single sample with `z`
/// declared as input `"z"`.
fn latent_graph(
    z: &[f64],
    w0: &ParameterSet,
    arch: &ArchitectureConfig,
    truth: &Trajectory,
    v: f64,
    alpha: f64,
) -> Result<(Graph, Vec<Var>, Var, Var), LossError> {
    arch.check_latent(z)?;
    arch.check_speed(v)?;
    let times = arch.times();
    if truth.times() != times {
        return Err(LossError::GridMismatch);
    }
    let dec = arch.decoder();
    dec.check(w0)?;
    let mut g = Graph::new();
    let bw = g.bind(w0)?;
    let dl = dec.layers(&bw)?;
    let zv = g.input("z", &Tensor::matrix(1, arch.d_z, z.to_vec())?)?;
    let pred = decoder_graph(&mut g, arch, &dl, zv, &[v], &times)?;
    let r = weighted_risk_graph(&mut g, pred, &truth.flat(), alpha, 1)?;
    Ok((g, dl.vars(), zv, r))
}

/// `risk + λ ‖∇_w risk‖² + λ₂ ‖z‖²` for one sample at the frozen decoder.
pub fn latent_inference_objective(
    z: &[f64],
    w0: &ParameterSet,
    arch: &ArchitectureConfig,
    truth: &Trajectory,
    v: f64,
    cfg: &RiskConfig,
) -> Result<f64, LossError> {
    let (g, wv, _, r) = latent_graph(z, w0, arch, truth, v, cfg.alpha)?;
    let risk = g.scalar(r)?;
    let pen: f64 = if cfg.lambda_irm == 0.0 {
        0.0
    } else {
        g.gradient(r, &wv)?.iter().flatten().map(|v| v * v).sum()
    };
    let zn: f64 = z.iter().map(|v| v * v).sum();
    Ok(risk + cfg.lambda_irm * pen + cfg.lambda_z * zn)
}

/// [`latent_inference_objective`] and its gradient with respect to `z`.
pub fn latent_inference_gradient(
    z: &[f64],
    w0: &ParameterSet,
    arch: &ArchitectureConfig,
    truth: &Trajectory,
    v: f64,
    cfg: &RiskConfig,
) -> Result<(f64, Vec<f64>), LossError> {
    let (g, wv, zv, r) = latent_graph(z, w0, arch, truth, v, cfg.alpha)?;
    let risk = g.scalar(r)?;
    let (pen, mut grad) = if cfg.lambda_irm == 0.0 {
        (0.0, g.gradient(r, &[zv])?.remove(0))
    } else {
        let pg = g.penalized_gradient(r, &wv, &[zv], cfg.lambda_irm)?;
        (pg.penalty, pg.gradient.into_iter().next().expect("one outer variable"))
    };
    let zn: f64 = z.iter().map(|v| v * v).sum();
    grad.iter_mut()
        .zip(z)
        .for_each(|(gi, zi)| *gi += 2.0 * cfg.lambda_z * zi);
    Ok((risk + cfg.lambda_irm * pen + cfg.lambda_z * zn, grad))
}

#[cfg(test)]
mod tests;
