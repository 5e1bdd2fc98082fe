//! Central finite differences and the tolerance metric used to check
//! analytic derivatives. Only forward evaluations are used here.

use alloc::vec::Vec;

/// Central difference `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = probe[i];
            probe[i] = x0 + h;
            let up = f(&probe);
            probe[i] = x0 - h;
            let down = f(&probe);
            probe[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest element-wise relative error of `actual` against `expected`.
///
/// Each difference is scaled by `max(|expected_i|, 1e-3·‖expected‖∞)`, so
/// components that are tiny next to the rest of the vector are judged on
/// the vector's scale rather than their own.
pub fn relative_error(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    let scale = expected.iter().chain(actual).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-300);
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (a - e).abs() / e.abs().max(floor))
        .fold(0.0, f64::max)
}
