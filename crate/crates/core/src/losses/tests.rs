use super::*;
use crate::data::Observation;
use crate::fdcheck::{central_difference, relative_error};
use crate::models::{decode_grid, init_params, LatentVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ArchitectureConfig {
    ArchitectureConfig {
        d_z: 2,
        decoder_hidden: vec![6],
        encoder_hidden: vec![5],
        critic_hidden: vec![5],
        n_points: 4,
        invariant_dim: 3,
        spurious_dim: 2,
        ..ArchitectureConfig::default()
    }
}

fn traj(arch: &ArchitectureConfig, flat: &[f64], v: f64) -> Trajectory {
    Trajectory::from_flat(&arch.times(), flat, v)
}

fn random_batch(rng: &mut ChaCha8Rng, arch: &ArchitectureConfig, env: u32, n: usize) -> EnvironmentBatch {
    let samples = (0..n)
        .map(|_| {
            let v = rng.random_range(0.0..arch.v_max);
            let obs = Observation {
                invariant_features: (0..arch.invariant_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                spurious_features: (0..arch.spurious_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                speed: v,
                environment_id: env,
            };
            let flat: Vec<f64> = (0..2 * arch.n_points).map(|_| rng.random_range(-3.0..3.0)).collect();
            Sample {
                obs,
                truth: traj(arch, &flat, v),
            }
        })
        .collect();
    EnvironmentBatch::new(EnvTag::Label(env), samples).unwrap()
}

/// Replaces every truth with the model's own prediction.
fn perfect(
    batch: &EnvironmentBatch,
    theta: &ParameterSet,
    w: &ParameterSet,
    arch: &ArchitectureConfig,
) -> EnvironmentBatch {
    let samples = batch
        .samples()
        .iter()
        .map(|s| {
            let z = crate::models::encode(theta, arch, &s.obs).unwrap();
            Sample {
                obs: s.obs.clone(),
                truth: decode_grid(w, arch, &z, s.obs.speed).unwrap(),
            }
        })
        .collect();
    EnvironmentBatch::new(batch.tag(), samples).unwrap()
}

#[test]
fn risk_single_point_example() {
    let t = Trajectory::from_flat(&[1.0], &[0.0, 0.0], 1.0);
    let p = Trajectory::from_flat(&[1.0], &[1.0, 2.0], 1.0);
    assert_eq!(risk(&p, &t, &RiskConfig::default()).unwrap(), 21.0);
    assert_eq!(risk(&t, &t, &RiskConfig::default()).unwrap(), 0.0);
    assert_eq!(RiskConfig::default().alpha, 5.0);
}

#[test]
fn risk_rejects_grid_mismatch() {
    let a = Trajectory::from_flat(&[1.0, 2.0], &[0.0; 4], 1.0);
    let b = Trajectory::from_flat(&[1.0, 2.5], &[0.0; 4], 1.0);
    let c = Trajectory::from_flat(&[1.0], &[0.0; 2], 1.0);
    assert_eq!(risk(&a, &b, &RiskConfig::default()), Err(LossError::GridMismatch));
    assert_eq!(risk(&a, &c, &RiskConfig::default()), Err(LossError::GridMismatch));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn risk_is_symmetric_and_nonnegative(
        a in proptest::collection::vec(-50.0f64..50.0, 8),
        b in proptest::collection::vec(-50.0f64..50.0, 8),
        alpha in 0.1f64..10.0,
    ) {
        let times = [0.75, 1.5, 2.25, 3.0];
        let (p, t) = (Trajectory::from_flat(&times, &a, 1.0), Trajectory::from_flat(&times, &b, 1.0));
        let cfg = RiskConfig { alpha, ..RiskConfig::default() };
        let r = risk(&p, &t, &cfg).unwrap();
        prop_assert_eq!(r, risk(&t, &p, &cfg).unwrap());
        prop_assert!(r >= 0.0);
        prop_assert_eq!(r == 0.0, a == b);
    }
}

#[test]
fn risk_config_validation() {
    let ok = RiskConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        RiskConfig { alpha: 0.0, ..ok },
        RiskConfig { lambda_irm: -1.0, ..ok },
        RiskConfig { lambda_z: -1e-3, ..ok },
        RiskConfig { alpha: f64::NAN, ..ok },
    ] {
        assert!(matches!(bad.validate(), Err(LossError::Config(_))));
    }
}

#[test]
fn batches_reject_mixed_or_empty() {
    let arch = small();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_batch(&mut rng, &arch, 0, 2);
    let b = random_batch(&mut rng, &arch, 1, 1);
    let mut mixed = a.samples().to_vec();
    mixed.extend_from_slice(b.samples());
    assert!(matches!(
        EnvironmentBatch::new(EnvTag::Label(0), mixed.clone()),
        Err(LossError::MixedEnvironments { expected: 0, found: 1 })
    ));
    assert!(EnvironmentBatch::new(EnvTag::Minibatch(0), mixed).is_ok());
    assert!(matches!(
        EnvironmentBatch::new(EnvTag::Label(0), vec![]),
        Err(LossError::Empty(_))
    ));
}

#[test]
fn erm_of_a_perfect_predictor_is_zero() {
    let arch = small();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = init_params(&arch.encoder(), 1);
    let w = init_params(&arch.decoder(), 1);
    let b = perfect(&random_batch(&mut rng, &arch, 0, 5), &theta, &w, &arch);
    let cfg = RiskConfig::default();
    assert!(erm_objective(&theta, &w, &[b.clone()], &arch, &cfg).unwrap() < 1e-24);
    assert!(nirm_objective(&theta, &w, &[b.clone()], &arch, &cfg).unwrap() < 1e-24);
    assert!(nirm_penalty(&theta, &w, &b, &arch, &cfg).unwrap() < 1e-24);
}

#[test]
fn erm_single_sample_and_equal_batches() {
    let arch = small();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = init_params(&arch.encoder(), 2);
    let w = init_params(&arch.decoder(), 2);
    let cfg = RiskConfig::default();
    let one = random_batch(&mut rng, &arch, 0, 1);
    let s = &one.samples()[0];
    let z = crate::models::encode(&theta, &arch, &s.obs).unwrap();
    let direct = risk(&decode_grid(&w, &arch, &z, s.obs.speed).unwrap(), &s.truth, &cfg).unwrap();
    let erm = erm_objective(&theta, &w, &[one], &arch, &cfg).unwrap();
    assert!((erm - direct).abs() <= 1e-12 * direct.abs().max(1.0));

    let a = random_batch(&mut rng, &arch, 0, 4);
    let b = random_batch(&mut rng, &arch, 1, 4);
    let ea = erm_objective(&theta, &w, &[a.clone()], &arch, &cfg).unwrap();
    let eb = erm_objective(&theta, &w, &[b.clone()], &arch, &cfg).unwrap();
    let both = erm_objective(&theta, &w, &[a, b], &arch, &cfg).unwrap();
    assert!((both - (ea + eb) / 2.0).abs() < 1e-12 * both);
    assert!(matches!(
        erm_objective(&theta, &w, &[], &arch, &cfg),
        Err(LossError::Empty(_))
    ));
}

#[test]
fn scalar_toy_penalty_and_objective() {
    // y = w·z with z = 1, truth 2, w0 = 1: R = (w − 2)² = 1, dR/dw = −2.
    let mut g = Graph::new();
    let w = g.input("w", &Tensor::scalar(1.0)).unwrap();
    let z = g.constant(&Tensor::scalar(1.0));
    let y = g.mul(w, z).unwrap();
    let d = g.offset(y, -2.0).unwrap();
    let r = g.square(d).unwrap();
    let pg = g.penalized_gradient(r, &[w], &[w], 1.0).unwrap();
    assert_eq!(pg.inner_gradient, vec![vec![-2.0]]);
    assert_eq!(pg.penalty, 4.0);
    assert_eq!(g.scalar(r).unwrap() + pg.penalty, 5.0);
}

#[test]
fn lambda_zero_reduces_to_risk() {
    let arch = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in 0..20 {
        let theta = init_params(&arch.encoder(), s);
        let w = init_params(&arch.decoder(), s + 100);
        let batches = [random_batch(&mut rng, &arch, 0, 6), random_batch(&mut rng, &arch, 1, 6)];
        let cfg = RiskConfig {
            lambda_irm: 0.0,
            ..RiskConfig::default()
        };
        let nirm = nirm_objective(&theta, &w, &batches, &arch, &cfg).unwrap();
        let erm = erm_objective(&theta, &w, &batches, &arch, &cfg).unwrap();
        assert!((nirm - 2.0 * erm).abs() <= 1e-12 * erm.max(1.0), "{nirm} vs 2·{erm}");

        let pen = nirm_objective_terms(&theta, &w, &batches, &arch, &cfg, Trainable::Encoder, true).unwrap();
        let plain = nirm_objective_terms(&theta, &w, &batches, &arch, &cfg, Trainable::Encoder, false).unwrap();
        assert_eq!(pen.objective.to_bits(), plain.objective.to_bits());
        let bits = |v: &Option<Vec<f64>>| v.as_ref().unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&pen.encoder_grad), bits(&plain.encoder_grad));
    }
}

#[test]
fn penalty_is_nonnegative_on_random_configurations() {
    let arch = ArchitectureConfig {
        decoder_hidden: vec![3],
        encoder_hidden: vec![3],
        n_points: 2,
        ..small()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = RiskConfig::default();
    for s in 0..1000 {
        let theta = init_params(&arch.encoder(), s);
        let w = init_params(&arch.decoder(), s);
        let b = random_batch(&mut rng, &arch, 0, 2);
        let p = nirm_penalty(&theta, &w, &b, &arch, &cfg).unwrap();
        assert!(p >= 0.0 && p.is_finite());
    }
}

#[test]
fn nirm_terms_match_the_objective_and_finite_differences() {
    let arch = small();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RiskConfig {
        lambda_irm: 1e-3,
        ..RiskConfig::default()
    };
    for s in 0..3 {
        let theta = init_params(&arch.encoder(), 10 + s);
        let w = init_params(&arch.decoder(), 20 + s);
        let batches = [random_batch(&mut rng, &arch, 0, 3), random_batch(&mut rng, &arch, 1, 3)];
        let t = nirm_objective_terms(&theta, &w, &batches, &arch, &cfg, Trainable::Both, true).unwrap();
        let obj = nirm_objective(&theta, &w, &batches, &arch, &cfg).unwrap();
        assert!((t.objective - obj).abs() <= 1e-12 * obj);
        assert!((t.objective - (t.risk + cfg.lambda_irm * t.penalty)).abs() <= 1e-12 * obj);

        let fd_theta = central_difference(
            |p| nirm_objective(&theta.unflatten(p).unwrap(), &w, &batches, &arch, &cfg).unwrap(),
            &theta.flatten(),
            1e-6,
        );
        assert!(relative_error(t.encoder_grad.as_ref().unwrap(), &fd_theta) < 1e-4);
        // Inner (decoder) and outer (encoder + decoder) overlap here.
        let fd_w = central_difference(
            |p| nirm_objective(&theta, &w.unflatten(p).unwrap(), &batches, &arch, &cfg).unwrap(),
            &w.flatten(),
            1e-6,
        );
        assert!(relative_error(t.decoder_grad.as_ref().unwrap(), &fd_w) < 1e-4);
    }
}

#[test]
fn trainable_selects_gradients() {
    let arch = small();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let theta = init_params(&arch.encoder(), 1);
    let w = init_params(&arch.decoder(), 1);
    let b = [random_batch(&mut rng, &arch, 0, 3)];
    let cfg = RiskConfig::default();
    let e = nirm_objective_terms(&theta, &w, &b, &arch, &cfg, Trainable::Encoder, true).unwrap();
    let d = nirm_objective_terms(&theta, &w, &b, &arch, &cfg, Trainable::Decoder, true).unwrap();
    let both = nirm_objective_terms(&theta, &w, &b, &arch, &cfg, Trainable::Both, true).unwrap();
    assert!(e.decoder_grad.is_none() && d.encoder_grad.is_none());
    assert_eq!(e.encoder_grad.unwrap().len(), theta.num_values());
    assert!(relative_error(&d.decoder_grad.unwrap(), both.decoder_grad.as_ref().unwrap()) < 1e-12);
}

#[test]
fn irmv1_examples() {
    assert_eq!(irmv1_penalty(&[1.0], &[1.0], None).unwrap(), 0.0);
    assert_eq!(irmv1_penalty(&[2.0], &[1.0], None).unwrap(), 16.0);
    assert!(matches!(irmv1_penalty(&[], &[], None), Err(LossError::Empty(_))));
    assert_eq!(irmv1_penalty(&[1.0, 2.0], &[1.0], None), Err(LossError::GridMismatch));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn irmv1_matches_closed_form(
        pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.1f64..5.0), 1..20),
    ) {
        let phi: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let wt: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let closed: f64 = phi.iter().zip(&y).zip(&wt).map(|((p, y), w)| 2.0 * w * (p - y) * p).sum();
        let got = irmv1_penalty(&phi, &y, Some(&wt)).unwrap();
        let expected = closed * closed;
        prop_assert!((got - expected).abs() <= 1e-8 * expected.max(1e-12), "{} vs {}", got, expected);
        let plain: f64 = phi.iter().zip(&y).map(|(p, y)| 2.0 * (p - y) * p).sum();
        let got = irmv1_penalty(&phi, &y, None).unwrap();
        prop_assert!((got - plain * plain).abs() <= 1e-8 * (plain * plain).max(1e-12));
    }
}

/// Critic `u·x` on the default input width, with `‖u‖ = norm`.
fn linear_critic(arch: &ArchitectureConfig, norm: f64, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = arch.critic_input_dim();
    let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let len = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: Vec<f64> = u.iter().map(|v| v * norm / len).collect();
    ParameterSet::new()
        .with("critic.l0.w", Tensor::matrix(n, 1, u).unwrap())
        .with("critic.l0.b", Tensor::vector(vec![0.3]))
}

fn linear_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        critic_hidden: vec![],
        ..ArchitectureConfig::default()
    }
}

fn random_rows(rng: &mut ChaCha8Rng, arch: &ArchitectureConfig, n: usize) -> Tensor {
    let w = arch.critic_input_dim();
    Tensor::matrix(n, w, (0..n * w).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap()
}

#[test]
fn gradient_penalty_of_linear_critics() {
    let arch = linear_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts = random_rows(&mut rng, &arch, 6);
    let (gp, grad) = gradient_penalty(&linear_critic(&arch, 1.0, 1), &arch, &pts, 10.0).unwrap();
    assert!(gp < 1e-24);
    assert!(grad.iter().all(|g| g.abs() < 1e-10));
    let (gp, _) = gradient_penalty(&linear_critic(&arch, 2.0, 1), &arch, &pts, 10.0).unwrap();
    assert!((gp - 1.0).abs() < 1e-10);
}

#[test]
fn identical_batches_have_zero_wasserstein_term() {
    let arch = ArchitectureConfig::default();
    let c = init_params(&arch.critic(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows = random_rows(&mut rng, &arch, 5);
    let l = wgan_critic_loss(&c, &arch, &rows, &rows, &[0.1, 0.3, 0.5, 0.7, 0.9], 10.0).unwrap();
    assert!(l.wasserstein.abs() < 1e-12);
    assert!((l.loss - 10.0 * l.gradient_penalty).abs() < 1e-12);
    assert!(wgan_critic_loss(&c, &arch, &rows, &rows, &[0.5], 10.0).is_err());
}

fn critic_loss_value(c: &ParameterSet, arch: &ArchitectureConfig, real: &Tensor, fake: &Tensor, mix: &[f64]) -> f64 {
    wgan_critic_loss(c, arch, real, fake, mix, 10.0).unwrap().loss
}

#[test]
fn critic_loss_gradient_matches_finite_differences() {
    let arch = ArchitectureConfig {
        critic_hidden: vec![6, 5],
        n_points: 3,
        ..ArchitectureConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in 0..3 {
        let c = init_params(&arch.critic(), s);
        let real = random_rows(&mut rng, &arch, 4);
        let fake = random_rows(&mut rng, &arch, 4);
        let mix = [0.2, 0.4, 0.6, 0.8];
        let l = wgan_critic_loss(&c, &arch, &real, &fake, &mix, 10.0).unwrap();
        let fd = central_difference(
            |p| critic_loss_value(&c.unflatten(p).unwrap(), &arch, &real, &fake, &mix),
            &c.flatten(),
            1e-6,
        );
        assert!(relative_error(&l.gradient.flatten(), &fd) < 1e-4);
    }
}

#[test]
fn generator_loss_examples() {
    let arch = ArchitectureConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rows = random_rows(&mut rng, &arch, 4);
    assert_eq!(wgan_generator_loss(&arch.critic().zeros(), &arch, &rows).unwrap(), 0.0);
    let c = init_params(&arch.critic(), 2);
    let mean: f64 = rows
        .data()
        .chunks_exact(33)
        .map(|r| crate::models::critic_score(&c, &arch, &r[..32], r[32]).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((wgan_generator_loss(&c, &arch, &rows).unwrap() + mean).abs() < 1e-12);
}

#[test]
fn generator_gradient_matches_finite_differences() {
    let arch = ArchitectureConfig {
        decoder_hidden: vec![5, 4],
        critic_hidden: vec![6],
        n_points: 3,
        d_z: 2,
        ..ArchitectureConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = init_params(&arch.critic(), 1);
    let w = init_params(&arch.decoder(), 1);
    let z = Tensor::matrix(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let v = [1.0, 5.0, 9.0];
    let (loss, grad) = generator_loss_gradient(&w, &c, &arch, &z, &v).unwrap();
    let value = |p: &[f64]| {
        let wp = w.unflatten(p).unwrap();
        let zs: Vec<_> = z.data().chunks(2).map(|r| LatentVector(r.to_vec())).collect();
        let trajs = crate::models::decode_grid_batch(&wp, &arch, &zs, &v).unwrap();
        wgan_generator_loss(&c, &arch, &critic_rows(&arch, &trajs).unwrap()).unwrap()
    };
    assert!((value(&w.flatten()) - loss).abs() < 1e-12);
    let fd = central_difference(value, &w.flatten(), 1e-6);
    assert!(relative_error(&grad.flatten(), &fd) < 1e-4);
}

#[test]
fn latent_objective_examples() {
    let arch = small();
    let w = init_params(&arch.decoder(), 3);
    let z_star = vec![0.4, -0.7];
    let truth = decode_grid(&w, &arch, &LatentVector(z_star.clone()), 6.0).unwrap();
    let cfg = RiskConfig {
        lambda_z: 0.0,
        ..RiskConfig::default()
    };
    assert_eq!(
        latent_inference_objective(&z_star, &w, &arch, &truth, 6.0, &cfg).unwrap(),
        0.0
    );

    let z = vec![1.1, 0.3];
    let off = RiskConfig {
        lambda_irm: 0.0,
        lambda_z: 0.0,
        ..RiskConfig::default()
    };
    let plain = risk(
        &decode_grid(&w, &arch, &LatentVector(z.clone()), 6.0).unwrap(),
        &truth,
        &off,
    )
    .unwrap();
    let got = latent_inference_objective(&z, &w, &arch, &truth, 6.0, &off).unwrap();
    assert!((got - plain).abs() <= 1e-12 * plain);

    let reg = RiskConfig { lambda_z: 0.25, ..off };
    let with = latent_inference_objective(&z, &w, &arch, &truth, 6.0, &reg).unwrap();
    assert_eq!(with, got + 0.25 * (1.1 * 1.1 + 0.3 * 0.3));
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let arch = small();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = RiskConfig {
        lambda_irm: 0.01,
        lambda_z: 0.1,
        ..RiskConfig::default()
    };
    for s in 0..5 {
        let w = init_params(&arch.decoder(), 30 + s);
        let flat: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let truth = traj(&arch, &flat, 4.0);
        let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (obj, grad) = latent_inference_gradient(&z, &w, &arch, &truth, 4.0, &cfg).unwrap();
        assert_eq!(
            obj,
            latent_inference_objective(&z, &w, &arch, &truth, 4.0, &cfg).unwrap()
        );
        let fd = central_difference(
            |p| latent_inference_objective(p, &w, &arch, &truth, 4.0, &cfg).unwrap(),
            &z,
            1e-6,
        );
        assert!(relative_error(&grad, &fd) < 1e-4);
    }
}
