use super::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn arch() -> ArchitectureConfig {
    ArchitectureConfig::default()
}

fn straight(v: f64) -> ManeuverSpec {
    ManeuverSpec {
        curvature: 0.0,
        initial_speed: v,
        target_speed: v,
        accel: 0.0,
    }
}

fn small_config(p: f64, n: usize) -> DatasetConfig {
    DatasetConfig {
        environments: alloc::vec![EnvironmentSpec {
            environment_id: 0,
            role: EnvironmentRole::Train,
            spurious_correlation: p,
            noise_scale: 0.5,
            sample_count: n,
        }],
        ..DatasetConfig::default()
    }
}

#[test]
fn straight_line_example() {
    assert_eq!(straight(10.0).position_at(1.0), (10.0, 0.0));
}

#[test]
fn arc_example() {
    let m = ManeuverSpec {
        curvature: 0.1,
        ..straight(10.0)
    };
    let (x, y) = m.position_at(1.0);
    assert!((x - 8.41471).abs() < 1e-5 && (y - 4.59698).abs() < 1e-5);
    assert!((x - libm::sin(1.0) / 0.1).abs() < 1e-12);
}

#[test]
fn negative_curvature_mirrors_lateral() {
    let left = ManeuverSpec {
        curvature: 0.07,
        initial_speed: 3.0,
        target_speed: 8.0,
        accel: 1.5,
    };
    let right = ManeuverSpec {
        curvature: -0.07,
        ..left
    };
    let a = gt_trajectory(&left, &arch(), 0.2).unwrap();
    let b = gt_trajectory(&right, &arch(), 0.2).unwrap();
    for (p, q) in a.points.iter().zip(&b.points) {
        assert_eq!(p.longitudinal, q.longitudinal);
        assert_eq!(p.lateral, -q.lateral);
    }
}

#[test]
fn continuous_at_zero_curvature() {
    let kappa = 1e-8;
    for v in [0.5, 4.0, 9.0, 10.0] {
        let line = gt_trajectory(&straight(v), &arch(), 0.2).unwrap();
        let arc = gt_trajectory(
            &ManeuverSpec {
                curvature: kappa,
                ..straight(v)
            },
            &arch(),
            0.2,
        )
        .unwrap();
        for (p, q) in line.points.iter().zip(&arc.points) {
            let s = p.longitudinal;
            // The exact gap is about κ·s²/2 laterally and κ²·s³/6 longitudinally.
            assert!((p.longitudinal - q.longitudinal).abs() < 1e-12);
            assert!((q.lateral - kappa * s * s / 2.0).abs() < 1e-12);
            if s <= 14.0 {
                assert!((p.lateral - q.lateral).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn trapezoidal_speed_profile() {
    let m = ManeuverSpec {
        curvature: 0.0,
        initial_speed: 2.0,
        target_speed: 5.0,
        accel: 1.5,
    };
    assert_eq!(m.speed_at(1.0), 3.5);
    assert_eq!(m.speed_at(2.0), 5.0);
    assert_eq!(m.speed_at(3.0), 5.0);
    // 2·2 + 0.75·4 = 7 over the ramp, then 5 m/s.
    assert!((m.distance_at(2.0) - 7.0).abs() < 1e-12);
    assert!((m.distance_at(3.0) - 12.0).abs() < 1e-12);
    let slow = ManeuverSpec {
        initial_speed: 6.0,
        target_speed: 0.0,
        accel: -1.5,
        ..m
    };
    assert_eq!(slow.speed_at(3.0), 1.5);
    assert_eq!(slow.speed_at(10.0), 0.0);
    let d = slow.distance_at(4.0);
    assert!((d - 12.0).abs() < 1e-12);
    assert!((slow.distance_at(6.0) - d).abs() < 1e-12);
}

#[test]
fn invalid_maneuvers_are_rejected() {
    let a = arch();
    for m in [
        ManeuverSpec {
            curvature: 0.3,
            ..straight(5.0)
        },
        straight(11.0),
        straight(-1.0),
        ManeuverSpec {
            target_speed: 8.0,
            accel: -1.0,
            ..straight(5.0)
        },
        ManeuverSpec {
            curvature: f64::NAN,
            ..straight(5.0)
        },
    ] {
        assert!(
            matches!(gt_trajectory(&m, &a, 0.2), Err(DataError::Maneuver(_))),
            "{m:?}"
        );
    }
}

#[test]
fn generated_trajectories_start_at_origin_and_advance() {
    let (ds, diag) = Dataset::generate_with_diagnostics(&small_config(0.9, 300), &arch()).unwrap();
    for (s, d) in ds.environments[0].samples.iter().zip(&diag[0]) {
        let m = d.maneuver;
        assert_eq!(m.position_at(0.0), (0.0, 0.0));
        let mut last = 0.0;
        for p in &s.truth.points {
            let travelled = m.distance_at(p.query_time);
            assert!(travelled >= last);
            last = travelled;
        }
        assert!(m.curvature.abs() <= 0.2);
        assert!((0.0..=10.0).contains(&s.obs.speed));
        assert_eq!(s.obs.speed, m.initial_speed);
        assert_eq!(s.obs.invariant_features.len(), 8);
        assert_eq!(s.obs.spurious_features.len(), 8);
    }
}

#[test]
fn generation_is_deterministic_and_seeded() {
    let cfg = DatasetConfig::default();
    let a = Dataset::generate(&cfg, &arch()).unwrap();
    let b = Dataset::generate(&cfg, &arch()).unwrap();
    assert_eq!(a, b);
    let other = Dataset::generate(&DatasetConfig { seed: 1, ..cfg.clone() }, &arch()).unwrap();
    assert_ne!(a.environments[0].samples[0], other.environments[0].samples[0]);
}

#[test]
fn environments_do_not_depend_on_order() {
    let cfg = DatasetConfig::default();
    let mut rev = cfg.clone();
    rev.environments.reverse();
    let a = Dataset::generate(&cfg, &arch()).unwrap();
    let b = Dataset::generate(&rev, &arch()).unwrap();
    assert_eq!(a.environments[0].samples, b.environments[2].samples);
    assert_eq!(a.environments[2].samples, b.environments[0].samples);
}

#[test]
fn full_correlation_makes_spurious_features_a_function_of_the_maneuver() {
    let mut cfg = small_config(1.0, 400);
    cfg.environments[0].noise_scale = 0.0;
    let (ds, diag) = Dataset::generate_with_diagnostics(&cfg, &arch()).unwrap();
    assert!(diag[0].iter().all(|d| d.spurious_matches));
    // Without noise the invariant features are also a function of the same
    // intent, so equal invariant features imply equal spurious features.
    let samples = &ds.environments[0].samples;
    let mut seen: Vec<(Vec<u64>, Vec<u64>)> = Vec::new();
    for s in samples {
        let key: Vec<u64> = s.obs.invariant_features.iter().map(|v| v.to_bits()).collect();
        let val: Vec<u64> = s.obs.spurious_features.iter().map(|v| v.to_bits()).collect();
        if let Some((_, v)) = seen.iter().find(|(k, _)| *k == key) {
            assert_eq!(*v, val);
        }
        seen.push((key, val));
    }
    // Deterministic map: spurious features are affine in the invariant ones.
    let fit = least_squares(
        &samples
            .iter()
            .map(|s| s.obs.invariant_features.clone())
            .collect::<Vec<_>>(),
        &samples.iter().map(|s| s.obs.spurious_features[0]).collect::<Vec<_>>(),
    );
    assert!(fit.1 < 1e-12, "residual {}", fit.1);
}

fn quartile_bins(xs: &[f64]) -> Vec<usize> {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts = [1, 2, 3].map(|q| sorted[q * xs.len() / 4]);
    xs.iter().map(|x| cuts.iter().filter(|c| x >= c).count()).collect()
}

/// Pearson chi-square p-value for independence of two 4-level variables.
fn independence_p_value(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut table = [[0.0f64; 4]; 4];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..4).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let e = rows[i] * cols[j] / n;
            stat += (table[i][j] - e) * (table[i][j] - e) / e;
        }
    }
    1.0 - ChiSquared::new(9.0).unwrap().cdf(stat)
}

fn spurious_vs_lateral(p: f64) -> f64 {
    let ds = Dataset::generate(&small_config(p, 2000), &arch()).unwrap();
    let s = &ds.environments[0].samples;
    let feature: Vec<f64> = s.iter().map(|s| s.obs.spurious_features[0]).collect();
    let lateral: Vec<f64> = s.iter().map(|s| s.truth.points.last().unwrap().lateral).collect();
    independence_p_value(&quartile_bins(&feature), &quartile_bins(&lateral))
}

#[test]
fn zero_correlation_spurious_features_are_independent() {
    assert!(spurious_vs_lateral(0.0) > 0.01);
    assert!(spurious_vs_lateral(0.9) < 1e-6);
}

/// Ordinary least squares with intercept; returns coefficients and mean squared residual.
fn least_squares(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let d = x[0].len() + 1;
    let row = |r: &Vec<f64>| core::iter::once(1.0).chain(r.iter().copied()).collect::<Vec<f64>>();
    let mut a = alloc::vec![alloc::vec![0.0; d + 1]; d];
    for (r, &t) in x.iter().zip(y) {
        let r = row(r);
        for i in 0..d {
            for j in 0..d {
                a[i][j] += r[i] * r[j];
            }
            a[i][d] += r[i] * t;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-9;
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..d).map(|i| a[i][d] / a[i][i]).collect();
    let mse = x
        .iter()
        .zip(y)
        .map(|(r, t)| {
            let pred: f64 = row(r).iter().zip(&beta).map(|(a, b)| a * b).sum();
            (pred - t) * (pred - t)
        })
        .sum::<f64>()
        / y.len() as f64;
    (beta, mse)
}

#[test]
fn spurious_only_regression_degrades_out_of_domain() {
    let ds = Dataset::generate(&DatasetConfig::default(), &arch()).unwrap();
    let target = |s: &Sample| s.truth.points.last().unwrap().lateral;
    let batches = ds.split(Split::Train);
    let train: Vec<&Sample> = batches.iter().flat_map(|b| b.samples()).collect();
    let x: Vec<Vec<f64>> = train.iter().map(|s| s.obs.spurious_features.clone()).collect();
    let y: Vec<f64> = train.iter().map(|s| target(s)).collect();
    let (beta, train_mse) = least_squares(&x, &y);
    let mse_on = |split: Split| {
        let b = ds.split(split);
        let s: Vec<&Sample> = b.iter().flat_map(|b| b.samples()).collect();
        s.iter()
            .map(|s| {
                let p: f64 = core::iter::once(&1.0)
                    .chain(&s.obs.spurious_features)
                    .zip(&beta)
                    .map(|(a, b)| a * b)
                    .sum();
                (p - target(s)) * (p - target(s))
            })
            .sum::<f64>()
            / s.len() as f64
    };
    let in_domain = mse_on(Split::InDomain);
    let ood = mse_on(Split::Ood);
    assert!(
        ood > 3.0 * in_domain,
        "train {train_mse} in-domain {in_domain} ood {ood}"
    );
}

#[test]
fn splits_partition_the_environments() {
    let cfg = DatasetConfig::default();
    let ds = Dataset::generate(&cfg, &arch()).unwrap();
    let train = ds.split(Split::Train);
    let held = ds.split(Split::InDomain);
    let ood = ds.split(Split::Ood);
    assert_eq!(train.iter().map(|b| b.len()).collect::<Vec<_>>(), [1600, 1600]);
    assert_eq!(held.iter().map(|b| b.len()).collect::<Vec<_>>(), [400, 400]);
    assert_eq!(ood.len(), 1);
    assert_eq!(ood[0].len(), 2000);
    assert_eq!(ood[0].tag(), EnvTag::Label(2));
    assert_eq!(train[0].samples()[..], ds.environments[0].samples[..1600]);
    assert_eq!(held[1].samples()[..], ds.environments[1].samples[1600..]);
}

#[test]
fn config_errors_name_the_field() {
    let a = arch();
    let mut cfg = DatasetConfig::default();
    cfg.environments[1].spurious_correlation = 1.5;
    let e = cfg.validate(&a).unwrap_err();
    assert!(e.to_string().contains("environments[1].spurious_correlation"), "{e}");
    let mut cfg = DatasetConfig::default();
    cfg.environments[0].sample_count = 0;
    assert!(cfg
        .validate(&a)
        .unwrap_err()
        .to_string()
        .contains("environments[0].sample_count"));
    let mut cfg = DatasetConfig::default();
    cfg.environments[2].environment_id = 0;
    assert!(cfg.validate(&a).is_err());
    let cfg = DatasetConfig {
        environments: Vec::new(),
        ..DatasetConfig::default()
    };
    assert!(Dataset::generate(&cfg, &a).is_err());
}
