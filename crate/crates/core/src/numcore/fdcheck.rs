//! Central finite-difference oracles for gradient verification.
//!
//! These are deliberately independent of the graph machinery: they only need
//! a closure from a flat parameter vector to a scalar, so they can certify
//! any differentiation path in the crate.

/// Central-difference gradient of `f` at `point` with step `h`.
pub fn central_diff_grad<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe);
        probe[i] = point[i] - h;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

/// Relative disagreement between two gradient vectors: max absolute
/// difference over the larger of the two magnitudes, floored so vanishing
/// gradients compare on an absolute scale.
pub fn grad_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let max_abs = a
        .iter()
        .chain(b.iter())
        .fold(0.0_f64, |m, &v| m.max(v.abs()))
        .max(1e-3);
    let max_diff = a
        .iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()));
    max_diff / max_abs
}
