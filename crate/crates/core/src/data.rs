//! Synthetic multi-environment driving data with a controllable shortcut.
//!
//! Each sample is a constant-curvature maneuver with a trapezoidal speed
//! profile. The observation carries a noisy embedding of the maneuver intent
//! (invariant features) and a noise-free embedding that, with probability
//! `p`, describes the true maneuver and otherwise an unrelated decoy
//! (spurious features). Training environments use large `p`; the test
//! environment inverts the correlation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::losses::{EnvTag, EnvironmentBatch, Sample};
use crate::models::{ArchitectureConfig, Trajectory, TrajectoryPoint};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("invalid maneuver: {0}")]
    Maneuver(String),
    #[error("invalid dataset config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub invariant_features: Vec<f64>,
    pub spurious_features: Vec<f64>,
    /// Meters per second.
    pub speed: f64,
    pub environment_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverSpec {
    /// 1/m, positive turns left.
    pub curvature: f64,
    /// m/s.
    pub initial_speed: f64,
    /// m/s.
    pub target_speed: f64,
    /// m/s², zero or pointing from the initial toward the target speed.
    pub accel: f64,
}

impl ManeuverSpec {
    pub fn validate(&self, v_max: f64, kappa_max: f64) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Maneuver(m));
        let finite = [self.curvature, self.initial_speed, self.target_speed, self.accel]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite field".into());
        }
        if self.curvature.abs() > kappa_max {
            return bad(format!("|curvature| {} exceeds {kappa_max}", self.curvature));
        }
        for (name, v) in [
            ("initial_speed", self.initial_speed),
            ("target_speed", self.target_speed),
        ] {
            if !(0.0..=v_max).contains(&v) {
                return bad(format!("{name} {v} outside [0, {v_max}]"));
            }
        }
        let gap = self.target_speed - self.initial_speed;
        if self.accel != 0.0 && gap * self.accel < 0.0 {
            return bad(format!("accel {} points away from the target speed", self.accel));
        }
        Ok(())
    }

    /// Speed at time `t`: ramps at `accel` from the initial speed and holds
    /// once the target is reached.
    pub fn speed_at(&self, t: f64) -> f64 {
        let v = self.initial_speed + self.accel * t;
        let (lo, hi) = if self.initial_speed <= self.target_speed {
            (self.initial_speed, self.target_speed)
        } else {
            (self.target_speed, self.initial_speed)
        };
        if self.accel == 0.0 {
            self.initial_speed
        } else {
            v.clamp(lo, hi).max(0.0)
        }
    }

    /// Arc length travelled by time `t`.
    pub fn distance_at(&self, t: f64) -> f64 {
        if self.accel == 0.0 {
            return self.initial_speed * t;
        }
        let ramp = ((self.target_speed - self.initial_speed) / self.accel).max(0.0);
        if t <= ramp {
            self.initial_speed * t + 0.5 * self.accel * t * t
        } else {
            self.initial_speed * ramp + 0.5 * self.accel * ramp * ramp + self.target_speed * (t - ramp)
        }
    }

    /// Position `(longitudinal, lateral)` at time `t`.
    pub fn position_at(&self, t: f64) -> (f64, f64) {
        let s = self.distance_at(t);
        let k = self.curvature;
        if k.abs() < 1e-9 {
            (s, 0.0)
        } else {
            {
                // 1 − cos x = 2 sin²(x/2), without the cancellation near κ = 0.
                let h = libm::sin(0.5 * k * s);
                (libm::sin(k * s) / k, 2.0 * h * h / k)
            }
        }
    }
}

/// Ground-truth trajectory of a maneuver on the grid `k·horizon/N`, `k = 1..=N`.
pub fn gt_trajectory(m: &ManeuverSpec, arch: &ArchitectureConfig, kappa_max: f64) -> Result<Trajectory, DataError> {
    m.validate(arch.v_max, kappa_max)?;
    let points = arch
        .times()
        .into_iter()
        .map(|t| {
            let (longitudinal, lateral) = m.position_at(t);
            TrajectoryPoint {
                longitudinal,
                lateral,
                query_time: t,
            }
        })
        .collect();
    Ok(Trajectory {
        points,
        condition_speed: m.initial_speed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentRole {
    /// Used for training; a tail fraction is held out as the in-domain split.
    Train,
    /// Out-of-distribution evaluation only.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub environment_id: u32,
    pub role: EnvironmentRole,
    /// Probability that the spurious features describe the true maneuver.
    pub spurious_correlation: f64,
    /// Standard deviation of the invariant-feature noise.
    pub noise_scale: f64,
    pub sample_count: usize,
}

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub environments: Vec<EnvironmentSpec>,
    /// 1/m.
    pub kappa_max: f64,
    /// Lowest initial and target speed drawn, m/s.
    pub min_speed: f64,
    /// Magnitude of the longitudinal acceleration, m/s².
    pub accel: f64,
    /// Lateral acceleration bound that limits curvature at speed, m/s².
    pub lateral_accel: f64,
    /// Fraction of each training environment held out as the in-domain split.
    pub holdout_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let env = |id, role, p| EnvironmentSpec {
            environment_id: id,
            role,
            spurious_correlation: p,
            noise_scale: 0.5,
            sample_count: 2000,
        };
        Self {
            seed: 0,
            environments: alloc::vec![
                env(0, EnvironmentRole::Train, 0.9),
                env(1, EnvironmentRole::Train, 0.8),
                env(2, EnvironmentRole::Test, 0.1),
            ],
            kappa_max: 0.2,
            min_speed: 0.0,
            accel: 1.5,
            lateral_accel: 2.0,
            holdout_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, arch: &ArchitectureConfig) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.environments.is_empty() {
            return bad("environments must not be empty".into());
        }
        for (i, e) in self.environments.iter().enumerate() {
            if !(0.0..=1.0).contains(&e.spurious_correlation) {
                return bad(format!(
                    "environments[{i}].spurious_correlation = {} must lie in [0, 1]",
                    e.spurious_correlation
                ));
            }
            if !(e.noise_scale >= 0.0 && e.noise_scale.is_finite()) {
                return bad(format!(
                    "environments[{i}].noise_scale = {} must be >= 0",
                    e.noise_scale
                ));
            }
            if e.sample_count == 0 {
                return bad(format!("environments[{i}].sample_count must be positive"));
            }
            if self.environments[..i]
                .iter()
                .any(|o| o.environment_id == e.environment_id)
            {
                return bad(format!(
                    "environments[{i}].environment_id {} repeated",
                    e.environment_id
                ));
            }
        }
        if !(self.kappa_max > 0.0 && self.kappa_max.is_finite()) {
            return bad(format!("kappa_max = {} must be positive", self.kappa_max));
        }
        if !(0.0..arch.v_max).contains(&self.min_speed) {
            return bad(format!("min_speed = {} must lie in [0, v_max)", self.min_speed));
        }
        if !(self.accel > 0.0 && self.accel.is_finite()) {
            return bad(format!("accel = {} must be positive", self.accel));
        }
        if !(self.lateral_accel > 0.0 && self.lateral_accel.is_finite()) {
            return bad(format!("lateral_accel = {} must be positive", self.lateral_accel));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!(
                "holdout_fraction = {} must lie in [0, 1)",
                self.holdout_fraction
            ));
        }
        Ok(())
    }
}

/// Fixed random affine map from the 2-D maneuver code to a feature vector.
#[derive(Debug, Clone, PartialEq)]
struct Embedding {
    matrix: Vec<[f64; 2]>,
    offset: Vec<f64>,
}

impl Embedding {
    fn draw(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let offset = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Self { matrix, offset }
    }

    fn apply(&self, code: [f64; 2]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| row[0] * code[0] + row[1] * code[1] + b)
            .collect()
    }
}

/// The quantities a maneuver is sampled from, before physical scaling.
#[derive(Debug, Clone, Copy)]
struct Intent {
    /// Curvature as a fraction of the speed-dependent limit, in [-1, 1].
    turn: f64,
    initial_speed: f64,
    target_speed: f64,
}

/// Generation-time facts about a sample that the data files do not carry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleDiagnostics {
    pub maneuver: ManeuverSpec,
    /// Whether the spurious features describe this sample's own maneuver.
    pub spurious_matches: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentData {
    pub spec: EnvironmentSpec,
    pub samples: Vec<Sample>,
}

/// Which part of a dataset to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Leading part of every training environment.
    Train,
    /// Held-out tail of every training environment.
    InDomain,
    /// Every test environment.
    Ood,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InDomain => "in_domain",
            Split::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub arch: ArchitectureConfig,
    pub environments: Vec<EnvironmentData>,
}

struct Generator<'a> {
    cfg: &'a DatasetConfig,
    arch: &'a ArchitectureConfig,
    invariant: Embedding,
    spurious: Embedding,
}

impl Generator<'_> {
    fn intent(&self, rng: &mut ChaCha8Rng) -> Intent {
        let lo = self.cfg.min_speed;
        let hi = self.arch.v_max;
        Intent {
            turn: rng.random_range(-1.0..=1.0),
            initial_speed: rng.random_range(lo..=hi),
            target_speed: rng.random_range(lo..=hi),
        }
    }

    fn maneuver(&self, i: Intent) -> ManeuverSpec {
        let fastest = i.initial_speed.max(i.target_speed);
        let limit = self.cfg.kappa_max.min(self.cfg.lateral_accel / (fastest * fastest));
        let gap = i.target_speed - i.initial_speed;
        let accel = if gap > 0.0 {
            self.cfg.accel
        } else if gap < 0.0 {
            -self.cfg.accel
        } else {
            0.0
        };
        ManeuverSpec {
            curvature: i.turn * limit,
            initial_speed: i.initial_speed,
            target_speed: i.target_speed,
            accel,
        }
    }

    /// The part of the intent not already given by the observed speed,
    /// scaled to [-1, 1].
    fn code(&self, i: Intent) -> [f64; 2] {
        let lo = self.cfg.min_speed;
        let hi = self.arch.v_max;
        [i.turn, 2.0 * (i.target_speed - lo) / (hi - lo) - 1.0]
    }

    fn environment(&self, spec: &EnvironmentSpec) -> Result<(EnvironmentData, Vec<SampleDiagnostics>), DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1 + u64::from(spec.environment_id));
        let mut samples = Vec::with_capacity(spec.sample_count);
        let mut diagnostics = Vec::with_capacity(spec.sample_count);
        for _ in 0..spec.sample_count {
            let intent = self.intent(&mut rng);
            let maneuver = self.maneuver(intent);
            let truth = gt_trajectory(&maneuver, self.arch, self.cfg.kappa_max)?;
            let mut invariant = self.invariant.apply(self.code(intent));
            for x in &mut invariant {
                let e: f64 = rng.sample(StandardNormal);
                *x += spec.noise_scale * e;
            }
            let matches = rng.random_bool(spec.spurious_correlation);
            let decoy = self.intent(&mut rng);
            let shown = if matches { intent } else { decoy };
            let spurious = self.spurious.apply(self.code(shown));
            let obs = Observation {
                invariant_features: invariant,
                spurious_features: spurious,
                speed: maneuver.initial_speed,
                environment_id: spec.environment_id,
            };
            samples.push(Sample { obs, truth });
            diagnostics.push(SampleDiagnostics {
                maneuver,
                spurious_matches: matches,
            });
        }
        let data = EnvironmentData {
            spec: spec.clone(),
            samples,
        };
        Ok((data, diagnostics))
    }
}

impl Dataset {
    /// Generates every environment. Environment `e` draws from stream `1 + e`
    /// of the seed, so environments are independent of each other and of
    /// generation order; the embeddings come from stream 0.
    pub fn generate(config: &DatasetConfig, arch: &ArchitectureConfig) -> Result<Self, DataError> {
        Self::generate_with_diagnostics(config, arch).map(|(d, _)| d)
    }

    /// [`Dataset::generate`] plus per-sample generation facts, indexed like
    /// the environments and their samples.
    pub fn generate_with_diagnostics(
        config: &DatasetConfig,
        arch: &ArchitectureConfig,
    ) -> Result<(Self, Vec<Vec<SampleDiagnostics>>), DataError> {
        config.validate(arch)?;
        arch.validate().map_err(|e| DataError::Config(format!("{e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let invariant = Embedding::draw(&mut rng, arch.invariant_dim);
        let spurious = Embedding::draw(&mut rng, arch.spurious_dim);
        let gen = Generator {
            cfg: config,
            arch,
            invariant,
            spurious,
        };
        let (environments, diagnostics) = config
            .environments
            .iter()
            .map(|spec| gen.environment(spec))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .unzip();
        let data = Self {
            config: config.clone(),
            arch: arch.clone(),
            environments,
        };
        Ok((data, diagnostics))
    }

    /// Number of leading samples of a training environment used for training.
    pub fn train_count(&self, spec: &EnvironmentSpec) -> usize {
        let held = libm::round(spec.sample_count as f64 * self.config.holdout_fraction) as usize;
        spec.sample_count - held.min(spec.sample_count - 1)
    }

    /// Samples of `split`, grouped by environment in configuration order.
    pub fn split(&self, split: Split) -> Vec<EnvironmentBatch> {
        self.environments
            .iter()
            .filter_map(|env| {
                let samples: &[Sample] = match (split, env.spec.role) {
                    (Split::Train, EnvironmentRole::Train) => &env.samples[..self.train_count(&env.spec)],
                    (Split::InDomain, EnvironmentRole::Train) => &env.samples[self.train_count(&env.spec)..],
                    (Split::Ood, EnvironmentRole::Test) => &env.samples,
                    _ => return None,
                };
                if samples.is_empty() {
                    return None;
                }
                let tag = EnvTag::Label(env.spec.environment_id);
                Some(EnvironmentBatch::new(tag, samples.to_vec()).expect("one environment, non-empty"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
