use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fdcheck::{central_difference, relative_error};

type Prog = fn(&mut Graph, &Bindings) -> Result<Var, EngineError>;

fn ps(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (n, s, d) in entries {
        p.insert(*n, Tensor::new(s.clone(), d.clone()).unwrap()).unwrap();
    }
    p
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn value(p: &impl Program, inputs: &ParameterSet) -> f64 {
    evaluate(p, inputs).unwrap().item().unwrap()
}

fn fd_gradient(p: &impl Program, inputs: &ParameterSet, h: f64) -> Vec<f64> {
    central_difference(|x| value(p, &inputs.unflatten(x).unwrap()), &inputs.flatten(), h)
}

/// Finite differences over `outer` of `‖∇_inner f‖²`, using only first-order gradients.
fn fd_gradient_norm(p: &impl Program, inner: &ParameterSet, outer: &ParameterSet, h: f64) -> Vec<f64> {
    central_difference(
        |x| {
            let o = outer.unflatten(x).unwrap();
            let all = inner.merged(&o).unwrap();
            let g = gradient(p, &all).unwrap();
            inner.names().map(|n| g.get(n).unwrap().squared_norm()).sum()
        },
        &outer.flatten(),
        h,
    )
}

#[test]
fn evaluate_examples() {
    let sum_sq = |g: &mut Graph, b: &Bindings| {
        let s = g.square(b.get("x")?)?;
        g.sum(s)
    };
    assert_eq!(value(&sum_sq, &ps(&[("x", vec![2], vec![1.0, 2.0])])), 5.0);
    let ident = |g: &mut Graph, b: &Bindings| g.sum(b.get("x")?);
    assert_eq!(value(&ident, &ps(&[("x", vec![1], vec![3.0])])), 3.0);
    let zero = |g: &mut Graph, b: &Bindings| {
        let y = g.scale(b.get("x")?, 0.0)?;
        g.sum(y)
    };
    assert_eq!(value(&zero, &ps(&[("x", vec![1], vec![7.0])])), 0.0);
}

#[test]
fn gradient_examples() {
    let sq = |g: &mut Graph, b: &Bindings| {
        let y = g.square(b.get("w")?)?;
        g.sum(y)
    };
    let gr = gradient(&sq, &ps(&[("w", vec![], vec![3.0])])).unwrap();
    assert_eq!(gr.get("w").unwrap().data(), &[6.0]);

    let constant = |g: &mut Graph, _: &Bindings| {
        let c = g.constant(&Tensor::scalar(4.0));
        g.sum(c)
    };
    let gr = gradient(&constant, &ps(&[("w", vec![], vec![3.0])])).unwrap();
    assert_eq!(gr.get("w").unwrap().data(), &[0.0]);

    let total = |g: &mut Graph, b: &Bindings| g.sum(b.get("w")?);
    let gr = gradient(&total, &ps(&[("w", vec![3], vec![1.0, 1.0, 1.0])])).unwrap();
    assert_eq!(gr.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn non_scalar_gradient_rejected() {
    let p = |g: &mut Graph, b: &Bindings| g.square(b.get("w")?);
    let err = gradient(&p, &ps(&[("w", vec![2], vec![1.0, 2.0])])).unwrap_err();
    assert!(matches!(err, EngineError::NotScalar { .. }));
}

#[test]
fn shape_mismatch_names_operation() {
    let p = |g: &mut Graph, b: &Bindings| {
        let y = g.add(b.get("a")?, b.get("b")?)?;
        g.sum(y)
    };
    let err = evaluate(&p, &ps(&[("a", vec![2], vec![1.0, 2.0]), ("b", vec![3], vec![0.0; 3])])).unwrap_err();
    match err {
        EngineError::Shape { op, node, .. } => {
            assert_eq!(op, "add");
            assert_eq!(node, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
    let err = evaluate(&p, &ps(&[("a", vec![2], vec![1.0, 2.0])])).unwrap_err();
    assert_eq!(err, EngineError::MissingInput("b".into()));
}

#[test]
fn sqrt_at_zero_is_rejected_only_on_active_path() {
    let p = |g: &mut Graph, b: &Bindings| {
        let r = g.sqrt(b.get("x")?)?;
        g.sum(r)
    };
    let err = gradient(&p, &ps(&[("x", vec![2], vec![0.0, 1.0])])).unwrap_err();
    assert!(matches!(err, EngineError::NonDifferentiable { op: "sqrt", .. }));

    // Same primitive off the differentiated path is fine.
    let mut g = Graph::new();
    let x = g.input("x", &Tensor::vector(vec![1.0, 2.0])).unwrap();
    let c = g.constant(&Tensor::vector(vec![0.0, 4.0]));
    let r = g.sqrt(c).unwrap();
    let y = g.mul(x, r).unwrap();
    let s = g.sum(y).unwrap();
    assert_eq!(g.gradient(s, &[x]).unwrap()[0], vec![0.0, 2.0]);
}

#[test]
fn gradient_of_gradient_norm_examples() {
    let residual = |g: &mut Graph, b: &Bindings| {
        let wt = g.mul(b.get("w")?, b.get("theta")?)?;
        let r = g.offset(wt, -1.0)?;
        let sq = g.square(r)?;
        g.sum(sq)
    };
    let inner = ps(&[("w", vec![1], vec![1.0])]);
    let outer = ps(&[("theta", vec![1], vec![1.0])]);
    let out = gradient_of_gradient_norm(&residual, &inner, &outer).unwrap();
    assert_eq!(out.get("theta").unwrap().data(), &[0.0]);

    let bilinear = |g: &mut Graph, b: &Bindings| {
        let wt = g.mul(b.get("w")?, b.get("theta")?)?;
        g.sum(wt)
    };
    for (w, th) in [(0.3, -1.7), (2.0, 0.5), (-1.0, 3.0)] {
        let out = gradient_of_gradient_norm(
            &bilinear,
            &ps(&[("w", vec![1], vec![w])]),
            &ps(&[("theta", vec![1], vec![th])]),
        )
        .unwrap();
        assert!((out.get("theta").unwrap().data()[0] - 2.0 * th).abs() < 1e-14);
    }
}

/// Two-layer smooth network `Σ c ∘ tanh(tanh(x W1 + b1) W2 + b2)` with the
/// first layer as outer and the second as inner parameters.
fn two_layer(g: &mut Graph, b: &Bindings) -> Result<Var, EngineError> {
    let x = b.get("x")?;
    let h = g.affine(x, b.get("w1")?, Some(b.get("b1")?))?;
    let h = g.tanh(h)?;
    let y = g.affine(h, b.get("w2")?, Some(b.get("b2")?))?;
    let y = g.softplus(y)?;
    let y = g.square(y)?;
    g.mean(y)
}

fn random_two_layer(rng: &mut ChaCha8Rng) -> (ParameterSet, ParameterSet) {
    let (n, i, h, o) = (
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..7),
        rng.random_range(1..4),
    );
    let outer = ps(&[
        ("x", vec![n, i], uniform(rng, n * i, -2.0, 2.0)),
        ("w1", vec![i, h], uniform(rng, i * h, -1.0, 1.0)),
        ("b1", vec![h], uniform(rng, h, -1.0, 1.0)),
    ]);
    let inner = ps(&[
        ("w2", vec![h, o], uniform(rng, h * o, -1.0, 1.0)),
        ("b2", vec![o], uniform(rng, o, -1.0, 1.0)),
    ]);
    (inner, outer)
}

#[test]
fn gradient_of_gradient_norm_matches_finite_differences_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (inner, outer) = random_two_layer(&mut rng);
        let analytic = gradient_of_gradient_norm(&two_layer, &inner, &outer).unwrap().flatten();
        let fd = fd_gradient_norm(&two_layer, &inner, &outer, 1e-5);
        let err = relative_error(&analytic, &fd);
        assert!(err < 1e-4, "err {err:e}");
    }
}

#[test]
fn penalized_gradient_combines_both_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (inner, outer) = random_two_layer(&mut rng);
    let all = inner.merged(&outer).unwrap();
    let mut g = Graph::new();
    let b = g.bind(&all).unwrap();
    let out = two_layer(&mut g, &b).unwrap();
    let iv: Vec<Var> = inner.names().map(|n| b.get(n).unwrap()).collect();
    let ov: Vec<Var> = outer.names().map(|n| b.get(n).unwrap()).collect();
    let pg = g.penalized_gradient(out, &iv, &ov, 0.7).unwrap();

    let first = gradient(&two_layer, &all).unwrap();
    let second = gradient_of_gradient_norm(&two_layer, &inner, &outer).unwrap();
    let want: Vec<f64> = outer
        .names()
        .flat_map(|n| {
            let a = first.get(n).unwrap().data().to_vec();
            let s = second.get(n).unwrap().data().to_vec();
            a.into_iter().zip(s).map(|(x, y)| x + 0.7 * y).collect::<Vec<_>>()
        })
        .collect();
    let got: Vec<f64> = pg.gradient.into_iter().flatten().collect();
    assert!(relative_error(&got, &want) < 1e-12);
    let pen: f64 = inner.names().map(|n| first.get(n).unwrap().squared_norm()).sum();
    assert!((pg.penalty - pen).abs() <= 1e-12 * pen.max(1.0));
}

#[test]
fn replay_is_bit_identical_and_tracks_new_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (inner, outer) = random_two_layer(&mut rng);
    let all = inner.merged(&outer).unwrap();
    let (mut g, _, out) = record(&two_layer, &all).unwrap();
    let first = g.value(out).to_vec();
    g.replay(&all).unwrap();
    assert_eq!(g.value(out), first.as_slice());

    let shifted = all
        .unflatten(&all.flatten().iter().map(|v| v * 0.5).collect::<Vec<_>>())
        .unwrap();
    g.replay(&shifted).unwrap();
    let fresh = evaluate(&two_layer, &shifted).unwrap();
    assert_eq!(g.value(out), fresh.data());

    let mut bad = ParameterSet::new();
    for (n, t) in all.iter() {
        let t = if n == "b1" {
            Tensor::vector(vec![0.0; t.len() + 1])
        } else {
            t.clone()
        };
        bad.insert(n, t).unwrap();
    }
    assert!(matches!(g.replay(&bad), Err(EngineError::Shape { op: "input", .. })));
}

/// One program per primitive, reduced to a scalar with fixed weights `c`.
fn primitive_programs() -> Vec<(&'static str, Prog)> {
    vec![
        ("affine", |g, b| {
            let y = g.affine(b.get("a")?, b.get("w")?, Some(b.get("v")?))?;
            let y = g.mul(y, b.get("c")?)?;
            g.sum(y)
        }),
        ("tanh", |g, b| {
            let y = g.tanh(b.get("a")?)?;
            let y = g.mul(y, b.get("ca")?)?;
            g.sum(y)
        }),
        ("softplus", |g, b| {
            let y = g.softplus(b.get("a")?)?;
            let y = g.mul(y, b.get("ca")?)?;
            g.sum(y)
        }),
        ("square", |g, b| {
            let y = g.square(b.get("a")?)?;
            let y = g.mul(y, b.get("ca")?)?;
            g.sum(y)
        }),
        ("sqrt", |g, b| {
            let s = g.square(b.get("a")?)?;
            let s = g.offset(s, 0.5)?;
            let y = g.sqrt(s)?;
            let y = g.mul(y, b.get("ca")?)?;
            g.sum(y)
        }),
        ("add_sub_mul", |g, b| {
            let a = b.get("a")?;
            let e = b.get("e")?;
            let s = g.add(a, e)?;
            let d = g.sub(a, e)?;
            let y = g.mul(s, d)?;
            let y = g.mul(y, b.get("ca")?)?;
            g.sum(y)
        }),
        ("scale_by", |g, b| {
            let y = g.scale_by(b.get("a")?, b.get("s")?)?;
            let y = g.mul(y, b.get("ca")?)?;
            let y = g.scale(y, -1.3)?;
            g.mean(y)
        }),
        ("row_sum", |g, b| {
            let y = g.mul(b.get("a")?, b.get("e")?)?;
            let r = g.row_sum(y)?;
            let r = g.square(r)?;
            g.sum(r)
        }),
        ("concat_slice", |g, b| {
            let y = g.concat_cols(&[b.get("a")?, b.get("e")?])?;
            let k = g.shape(y)[1];
            let left = g.slice_cols(y, 1, k)?;
            let y = g.tanh(left)?;
            let y = g.square(y)?;
            g.sum(y)
        }),
        ("gather_reshape", |g, b| {
            let a = b.get("a")?;
            let rows = g.shape(a)[0];
            let idx: Vec<usize> = (0..2 * rows).map(|i| (i * 7 + 1) % rows).collect();
            let y = g.gather_rows(a, idx)?;
            let n = g.value(y).len();
            let y = g.reshape(y, &[n])?;
            let y = g.softplus(y)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        }),
    ]
}

fn primitive_inputs(rng: &mut ChaCha8Rng) -> ParameterSet {
    let (n, m, o) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    ps(&[
        ("a", vec![n, m], uniform(rng, n * m, -2.0, 2.0)),
        ("e", vec![n, m], uniform(rng, n * m, -2.0, 2.0)),
        ("ca", vec![n, m], uniform(rng, n * m, -2.0, 2.0)),
        ("w", vec![m, o], uniform(rng, m * o, -2.0, 2.0)),
        ("v", vec![o], uniform(rng, o, -2.0, 2.0)),
        ("c", vec![n, o], uniform(rng, n * o, -2.0, 2.0)),
        ("s", vec![], uniform(rng, 1, -2.0, 2.0)),
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = primitive_inputs(&mut rng);
        for (name, p) in primitive_programs() {
            let analytic = gradient(&p, &inputs).unwrap().flatten();
            let fd = fd_gradient(&p, &inputs, 1e-6);
            let err = relative_error(&analytic, &fd);
            prop_assert!(err < 1e-5, "{}: relative error {:e}", name, err);
        }
    }

    #[test]
    fn every_primitive_second_order_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = primitive_inputs(&mut rng);
        // Inner `a`, everything else outer: exercises every mixed partial.
        let inner = all.filter_prefix("a");
        let mut outer = ParameterSet::new();
        for (n, t) in all.iter().filter(|(n, _)| *n != "a") {
            outer.insert(n, t.clone()).unwrap();
        }
        for (name, p) in primitive_programs() {
            let analytic = gradient_of_gradient_norm(&p, &inner, &outer).unwrap().flatten();
            let fd = fd_gradient_norm(&p, &inner, &outer, 1e-5);
            let err = relative_error(&analytic, &fd);
            prop_assert!(err < 1e-4, "{}: relative error {:e}", name, err);
        }
    }

    #[test]
    fn gradient_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = primitive_inputs(&mut rng);
        let progs = primitive_programs();
        let (f, h) = (progs[1].1, progs[8].1);
        let combo = move |g: &mut Graph, bd: &Bindings| {
            let x = f(g, bd)?;
            let y = h(g, bd)?;
            let x = g.scale(x, a)?;
            let y = g.scale(y, b)?;
            g.add(x, y)
        };
        let lhs = gradient(&combo, &inputs).unwrap().flatten();
        let gf = gradient(&f, &inputs).unwrap().flatten();
        let gh = gradient(&h, &inputs).unwrap().flatten();
        let rhs: Vec<f64> = gf.iter().zip(&gh).map(|(x, y)| a * x + b * y).collect();
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }
}
