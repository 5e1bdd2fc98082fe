//! The trajectory decoder `G(t, z, v)`, the observation encoder `Φ` and the
//! Wasserstein critic `D`, each a multilayer perceptron recorded on a
//! [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::engine::{Bindings, EngineError, Graph, Var};
use crate::tensor::{ParameterSet, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("query time {t} s outside [0, {horizon}] s")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("speed {v} m/s outside [0, {v_max}] m/s")]
    SpeedOutOfRange { v: f64, v_max: f64 },
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid architecture: {0}")]
    Config(String),
}

/// Sizes shared by every model and by the benchmark data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub d_z: usize,
    pub decoder_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Seconds.
    pub horizon: f64,
    pub n_points: usize,
    /// Meters per second.
    pub v_max: f64,
    pub invariant_dim: usize,
    pub spurious_dim: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            d_z: 8,
            decoder_hidden: vec![64, 64, 64],
            encoder_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            horizon: 3.0,
            n_points: 16,
            v_max: 10.0,
            invariant_dim: 8,
            spurious_dim: 8,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_z == 0 {
            return bad("d_z must be positive".into());
        }
        for (name, widths) in [
            ("decoder_hidden", &self.decoder_hidden),
            ("encoder_hidden", &self.encoder_hidden),
            ("critic_hidden", &self.critic_hidden),
        ] {
            if widths.contains(&0) {
                return bad(format!("{name} widths must be positive"));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.n_points < 2 {
            return bad(format!("n_points must be at least 2, got {}", self.n_points));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return bad(format!("v_max must be positive, got {}", self.v_max));
        }
        if self.invariant_dim == 0 || self.spurious_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        Ok(())
    }

    /// Query times `k·horizon/N` for `k = 1..=N`.
    pub fn times(&self) -> Vec<f64> {
        let n = self.n_points as f64;
        (1..=self.n_points).map(|k| k as f64 * self.horizon / n).collect()
    }

    /// Fixed gain applied to the decoder output so that unit-scale network
    /// outputs span the distance reachable within the horizon.
    pub fn output_scale(&self) -> f64 {
        self.v_max * self.horizon
    }

    pub fn encoder_input_dim(&self) -> usize {
        self.invariant_dim + self.spurious_dim + 1
    }

    pub fn critic_input_dim(&self) -> usize {
        2 * self.n_points + 1
    }

    pub fn decoder(&self) -> Mlp {
        Mlp::new("dec", 2 + self.d_z, &self.decoder_hidden, 2, Activation::Tanh)
    }

    pub fn encoder(&self) -> Mlp {
        Mlp::new(
            "enc",
            self.encoder_input_dim(),
            &self.encoder_hidden,
            self.d_z,
            Activation::Tanh,
        )
    }

    pub fn critic(&self) -> Mlp {
        Mlp::new(
            "critic",
            self.critic_input_dim(),
            &self.critic_hidden,
            1,
            Activation::Softplus,
        )
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<(), ModelError> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(ModelError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            })
        }
    }

    pub(crate) fn check_speed(&self, v: f64) -> Result<(), ModelError> {
        if (0.0..=self.v_max).contains(&v) {
            Ok(())
        } else {
            Err(ModelError::SpeedOutOfRange { v, v_max: self.v_max })
        }
    }

    pub(crate) fn check_latent(&self, z: &[f64]) -> Result<(), ModelError> {
        if z.len() != self.d_z {
            return Err(ModelError::Dimension {
                what: "latent",
                expected: self.d_z,
                got: z.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Softplus,
}

/// Fully connected network: hidden layers with `activation`, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    widths: Vec<usize>,
    activation: Activation,
}

/// Weight and bias variables of each layer of an [`Mlp`] in one graph.
#[derive(Debug, Clone)]
pub struct Layers(Vec<(Var, Var)>);

impl Layers {
    pub fn vars(&self) -> Vec<Var> {
        self.0.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl Mlp {
    pub fn new(prefix: &str, input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self {
            prefix: prefix.into(),
            widths,
            activation,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least input and output widths")
    }

    fn names(&self, layer: usize) -> (String, String) {
        (
            format!("{}.l{layer}.w", self.prefix),
            format!("{}.l{layer}.b", self.prefix),
        )
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weights uniform in `[-1/√fan_in, 1/√fan_in]`, biases likewise.
    pub fn init(&self, rng: &mut impl Rng) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (i, w) in self.widths.windows(2).enumerate() {
            let s = 1.0 / libm::sqrt(w[0] as f64);
            let (wn, bn) = self.names(i);
            let wd = (0..w[0] * w[1]).map(|_| rng.random_range(-s..=s)).collect();
            let bd = (0..w[1]).map(|_| rng.random_range(-s..=s)).collect();
            p.insert(wn, Tensor::new(vec![w[0], w[1]], wd).expect("sized"))
                .expect("fresh names");
            p.insert(bn, Tensor::new(vec![w[1]], bd).expect("sized"))
                .expect("fresh names");
        }
        p
    }

    pub fn zeros(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (i, w) in self.widths.windows(2).enumerate() {
            let (wn, bn) = self.names(i);
            p.insert(wn, Tensor::zeros(vec![w[0], w[1]])).expect("fresh names");
            p.insert(bn, Tensor::zeros(vec![w[1]])).expect("fresh names");
        }
        p
    }

    /// Looks up this network's parameters among bound graph inputs.
    pub fn layers(&self, b: &Bindings) -> Result<Layers, EngineError> {
        (0..self.widths.len() - 1)
            .map(|i| {
                let (wn, bn) = self.names(i);
                Ok((b.get(&wn)?, b.get(&bn)?))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Layers)
    }

    /// Checks that `params` holds exactly this network's tensors.
    pub fn check(&self, params: &ParameterSet) -> Result<(), ModelError> {
        params.check_layout(&self.zeros()).map_err(ModelError::from)
    }

    /// Applies the network row-wise to the `rows × input_dim` matrix `x`.
    pub fn apply(&self, g: &mut Graph, layers: &Layers, mut x: Var) -> Result<Var, EngineError> {
        let last = layers.0.len() - 1;
        for (i, &(w, b)) in layers.0.iter().enumerate() {
            x = g.affine(x, w, Some(b))?;
            if i < last {
                x = match self.activation {
                    Activation::Tanh => g.tanh(x)?,
                    Activation::Softplus => g.softplus(x)?,
                };
            }
        }
        Ok(x)
    }
}

/// Deterministic initial parameters for one model family. Each family draws
/// from its own stream of the seed so that changing one architecture leaves
/// the others untouched.
pub fn init_params(mlp: &Mlp, seed: u64) -> ParameterSet {
    let stream = match mlp.prefix() {
        "dec" => 1,
        "enc" => 2,
        "critic" => 3,
        _ => 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    mlp.init(&mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros(d_z: usize) -> Self {
        Self(vec![0.0; d_z])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Meters along the initial heading.
    pub longitudinal: f64,
    /// Meters to the left of the initial heading.
    pub lateral: f64,
    /// Seconds.
    pub query_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Meters per second.
    pub condition_speed: f64,
}

impl Trajectory {
    /// Builds a trajectory from interleaved `(longitudinal, lateral)` values.
    pub fn from_flat(times: &[f64], flat: &[f64], condition_speed: f64) -> Self {
        debug_assert_eq!(flat.len(), 2 * times.len());
        let points = times
            .iter()
            .zip(flat.chunks_exact(2))
            .map(|(&t, p)| TrajectoryPoint {
                longitudinal: p[0],
                lateral: p[1],
                query_time: t,
            })
            .collect();
        Self {
            points,
            condition_speed,
        }
    }

    /// Interleaved `(longitudinal, lateral)` values in time order.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.longitudinal, p.lateral]).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.query_time).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Polyline length from the origin through every point.
    pub fn path_length(&self) -> f64 {
        let mut prev = (0.0, 0.0);
        let mut total = 0.0;
        for p in &self.points {
            total += libm::hypot(p.longitudinal - prev.0, p.lateral - prev.1);
            prev = (p.longitudinal, p.lateral);
        }
        total
    }

    /// True when both trajectories are sampled at exactly the same times.
    pub fn same_grid(&self, other: &Trajectory) -> bool {
        self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| a.query_time == b.query_time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDerivatives {
    pub query_times: Vec<f64>,
    /// `(longitudinal, lateral)` m/s per query time.
    pub velocity: Vec<[f64; 2]>,
    /// `(longitudinal, lateral)` m/s² per query time.
    pub acceleration: Vec<[f64; 2]>,
}

/// Records the raw decoder network `f` on the rows `[t/horizon, z_i, v_i/v_max]`.
fn decoder_rows(
    g: &mut Graph,
    arch: &ArchitectureConfig,
    layers: &Layers,
    t_col: Var,
    z_rows: Var,
    speeds: &[f64],
) -> Result<Var, EngineError> {
    let rows = speeds.len();
    let t_norm = g.scale(t_col, 1.0 / arch.horizon)?;
    let v = g.constant_matrix(rows, 1, speeds.iter().map(|s| s / arch.v_max).collect())?;
    let x = g.concat_cols(&[t_norm, z_rows, v])?;
    arch.decoder().apply(g, layers, x)
}

/// Records the anchored decoder for a batch of latents on a shared time grid.
///
/// `z` is `B × d_z`; the result is `(B·T) × 2` with rows ordered sample-major
/// (`row = i·T + k`), so reshaping to `B × 2T` gives flattened trajectories.
pub fn decoder_graph(
    g: &mut Graph,
    arch: &ArchitectureConfig,
    layers: &Layers,
    z: Var,
    speeds: &[f64],
    times: &[f64],
) -> Result<Var, EngineError> {
    let b = speeds.len();
    let nt = times.len();
    let expand: Vec<usize> = (0..b * nt).map(|r| r / nt).collect();
    let t_col = g.constant_matrix(b * nt, 1, (0..b * nt).map(|r| times[r % nt]).collect())?;
    let z_rows = g.gather_rows(z, expand.clone())?;
    let v_rows: Vec<f64> = expand.iter().map(|&i| speeds[i]).collect();
    let f_t = decoder_rows(g, arch, layers, t_col, z_rows, &v_rows)?;
    let t0 = g.constant_matrix(b, 1, vec![0.0; b])?;
    let f_0 = decoder_rows(g, arch, layers, t0, z, speeds)?;
    let f_0 = g.gather_rows(f_0, expand)?;
    let y = g.sub(f_t, f_0)?;
    g.scale(y, arch.output_scale())
}

fn latent_matrix(arch: &ArchitectureConfig, zs: &[&[f64]]) -> Result<Tensor, ModelError> {
    let mut data = Vec::with_capacity(zs.len() * arch.d_z);
    for z in zs {
        arch.check_latent(z)?;
        data.extend_from_slice(z);
    }
    Ok(Tensor::matrix(zs.len(), arch.d_z, data)?)
}

fn decode_flat(
    w: &ParameterSet,
    arch: &ArchitectureConfig,
    zs: &[&[f64]],
    speeds: &[f64],
    times: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let dec = arch.decoder();
    dec.check(w)?;
    for &t in times {
        arch.check_time(t)?;
    }
    for &v in speeds {
        arch.check_speed(v)?;
    }
    let z = latent_matrix(arch, zs)?;
    let mut g = Graph::new();
    let b = g.bind(w)?;
    let layers = dec.layers(&b)?;
    let zv = g.constant(&z);
    let y = decoder_graph(&mut g, arch, &layers, zv, speeds, times)?;
    Ok(g.value(y).to_vec())
}

/// Displacement `(longitudinal, lateral)` in meters at time `t`.
pub fn decode(
    w: &ParameterSet,
    arch: &ArchitectureConfig,
    t: f64,
    z: &LatentVector,
    v: f64,
) -> Result<(f64, f64), ModelError> {
    let y = decode_flat(w, arch, &[z.values()], &[v], &[t])?;
    Ok((y[0], y[1]))
}

/// The decoder evaluated on the configured grid `t_k = k·horizon/N`.
pub fn decode_grid(
    w: &ParameterSet,
    arch: &ArchitectureConfig,
    z: &LatentVector,
    v: f64,
) -> Result<Trajectory, ModelError> {
    let times = arch.times();
    let y = decode_flat(w, arch, &[z.values()], &[v], &times)?;
    Ok(Trajectory::from_flat(&times, &y, v))
}

/// [`decode_grid`] for many `(z, v)` pairs in one pass.
pub fn decode_grid_batch(
    w: &ParameterSet,
    arch: &ArchitectureConfig,
    zs: &[LatentVector],
    speeds: &[f64],
) -> Result<Vec<Trajectory>, ModelError> {
    if zs.len() != speeds.len() {
        return Err(ModelError::Dimension {
            what: "speeds per latent",
            expected: zs.len(),
            got: speeds.len(),
        });
    }
    if zs.is_empty() {
        return Ok(Vec::new());
    }
    let times = arch.times();
    let refs: Vec<&[f64]> = zs.iter().map(|z| z.values()).collect();
    let y = decode_flat(w, arch, &refs, speeds, &times)?;
    Ok(y.chunks_exact(2 * times.len())
        .zip(speeds)
        .map(|(c, &v)| Trajectory::from_flat(&times, c, v))
        .collect())
}

/// Time derivatives of the decoder at each of `times`, taken analytically:
/// a reverse sweep per output coordinate gives the velocity and a tangent in
/// `t` carried through that sweep gives the acceleration.
pub fn decode_derivatives(
    w: &ParameterSet,
    arch: &ArchitectureConfig,
    times: &[f64],
    z: &LatentVector,
    v: f64,
) -> Result<TrajectoryDerivatives, ModelError> {
    let dec = arch.decoder();
    dec.check(w)?;
    arch.check_latent(z.values())?;
    arch.check_speed(v)?;
    for &t in times {
        arch.check_time(t)?;
    }
    let n = times.len();
    let mut g = Graph::new();
    let b = g.bind(w)?;
    let layers = dec.layers(&b)?;
    let t = g.input("t", &Tensor::matrix(n, 1, times.to_vec())?)?;
    let z_rows = g.constant_matrix(n, arch.d_z, z.values().repeat(n))?;
    let f = decoder_rows(&mut g, arch, &layers, t, z_rows, &vec![v; n])?;
    // The anchor f(0) does not depend on t and drops out of both derivatives.
    let y = g.scale(f, arch.output_scale())?;
    let ones = vec![1.0; n];
    let mut velocity = vec![[0.0; 2]; n];
    let mut acceleration = vec![[0.0; 2]; n];
    for c in 0..2 {
        let mut seed = vec![0.0; 2 * n];
        for r in 0..n {
            seed[2 * r + c] = 1.0;
        }
        let m = g.mixed_directional(y, Some(&seed), &[t], &[&ones], &[t])?;
        for r in 0..n {
            velocity[r][c] = m.gradient[0][r];
            acceleration[r][c] = m.hessian_direction[0][r];
        }
    }
    Ok(TrajectoryDerivatives {
        query_times: times.to_vec(),
        velocity,
        acceleration,
    })
}

/// Encoder input row: invariant features, spurious features, speed / v_max.
pub fn encoder_features(arch: &ArchitectureConfig, obs: &Observation) -> Result<Vec<f64>, ModelError> {
    if obs.invariant_features.len() != arch.invariant_dim {
        return Err(ModelError::Dimension {
            what: "invariant features",
            expected: arch.invariant_dim,
            got: obs.invariant_features.len(),
        });
    }
    if obs.spurious_features.len() != arch.spurious_dim {
        return Err(ModelError::Dimension {
            what: "spurious features",
            expected: arch.spurious_dim,
            got: obs.spurious_features.len(),
        });
    }
    let mut x = Vec::with_capacity(arch.encoder_input_dim());
    x.extend_from_slice(&obs.invariant_features);
    x.extend_from_slice(&obs.spurious_features);
    x.push(obs.speed / arch.v_max);
    Ok(x)
}

/// Stacks encoder inputs for a batch of observations into one matrix.
pub fn encoder_matrix<'a>(
    arch: &ArchitectureConfig,
    obs: impl IntoIterator<Item = &'a Observation>,
) -> Result<Tensor, ModelError> {
    let mut data = Vec::new();
    let mut rows = 0;
    for o in obs {
        data.extend(encoder_features(arch, o)?);
        rows += 1;
    }
    Ok(Tensor::matrix(rows, arch.encoder_input_dim(), data)?)
}

/// Latent for each observation in a batch.
pub fn encode_batch(
    theta: &ParameterSet,
    arch: &ArchitectureConfig,
    obs: &[Observation],
) -> Result<Vec<LatentVector>, ModelError> {
    if obs.is_empty() {
        return Ok(Vec::new());
    }
    let enc = arch.encoder();
    enc.check(theta)?;
    let x = encoder_matrix(arch, obs)?;
    let mut g = Graph::new();
    let b = g.bind(theta)?;
    let layers = enc.layers(&b)?;
    let xv = g.constant(&x);
    let z = enc.apply(&mut g, &layers, xv)?;
    Ok(g.value(z)
        .chunks_exact(arch.d_z)
        .map(|c| LatentVector(c.to_vec()))
        .collect())
}

pub fn encode(theta: &ParameterSet, arch: &ArchitectureConfig, obs: &Observation) -> Result<LatentVector, ModelError> {
    Ok(encode_batch(theta, arch, core::slice::from_ref(obs))?.remove(0))
}

/// Critic input row: the flattened trajectory followed by the raw speed.
pub fn critic_row(arch: &ArchitectureConfig, traj_points: &[f64], v: f64) -> Result<Vec<f64>, ModelError> {
    if traj_points.len() != 2 * arch.n_points {
        return Err(ModelError::Dimension {
            what: "flattened trajectory",
            expected: 2 * arch.n_points,
            got: traj_points.len(),
        });
    }
    let mut row = Vec::with_capacity(traj_points.len() + 1);
    row.extend_from_slice(traj_points);
    row.push(v);
    Ok(row)
}

/// Unbounded Wasserstein critic score of one flattened trajectory.
pub fn critic_score(
    params: &ParameterSet,
    arch: &ArchitectureConfig,
    traj_points: &[f64],
    v: f64,
) -> Result<f64, ModelError> {
    let critic = arch.critic();
    critic.check(params)?;
    let row = critic_row(arch, traj_points, v)?;
    let mut g = Graph::new();
    let b = g.bind(params)?;
    let layers = critic.layers(&b)?;
    let x = g.constant_matrix(1, row.len(), row)?;
    let s = critic.apply(&mut g, &layers, x)?;
    Ok(g.scalar(s)?)
}
