//! Value-level numeric kernels shared by the graph ops and the fast
//! (non-recording) evaluation paths, so both produce bitwise-identical
//! results. All reductions run left to right over row-major storage.

use crate::error::{Error, Result};

/// Numerically stable softmax: subtracts the max before exponentiating.
///
/// Entries may underflow to exactly zero for logit spreads beyond ~745;
/// downstream log/KL/cross-entropy ops surface that as a domain error.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least 2 logits, got {}",
            z.len()
        )));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("softmax input at index {i}"),
        });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = sum(&exps);
    Ok(exps.iter().map(|&e| e / total).collect())
}

/// KL divergence Σ p_i (ln p_i − ln q_i) with the 0·ln 0 := 0 convention.
/// Computed from log-probabilities to avoid cancellation in ln(p/q).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            detail: format!("P has {} entries, Q has {}", p.len(), q.len()),
        });
    }
    validate_distribution(p, "P")?;
    validate_distribution(q, "Q")?;
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InfiniteDivergence { index: i });
        }
        acc += pi * (pi.ln() - qi.ln());
    }
    Ok(acc)
}

/// Cross-entropy −ln p_y of a probability vector against a class index.
pub fn cross_entropy(p: &[f64], class: usize) -> Result<f64> {
    if class >= p.len() {
        return Err(Error::InvalidClass {
            class,
            classes: p.len(),
        });
    }
    if p[class] == 0.0 {
        return Err(Error::InfiniteLoss { class });
    }
    Ok(-p[class].ln())
}

/// Left-to-right sum; the fixed order keeps runs bitwise reproducible.
pub fn sum(values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        acc += v;
    }
    acc
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub fn norm_sq(values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        acc += v * v;
    }
    acc
}

pub fn norm2(values: &[f64]) -> f64 {
    norm_sq(values).sqrt()
}

pub fn norm1(values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        acc += v.abs();
    }
    acc
}

pub fn norm_inf(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, &v| m.max(v.abs()))
}

/// y = W·x for a row-major (rows × cols) matrix.
pub fn matvec(rows: usize, cols: usize, w: &[f64], x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut y = Vec::with_capacity(rows);
    for r in 0..rows {
        y.push(dot(&w[r * cols..(r + 1) * cols], x));
    }
    y
}

/// y = Wᵀ·v for a row-major (rows × cols) matrix.
pub fn matvec_transposed(rows: usize, cols: usize, w: &[f64], v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(v.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for (c, &wrc) in row.iter().enumerate() {
            y[c] += wrc * v[r];
        }
    }
    y
}

pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.tanh()).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn validate_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidDistribution {
            detail: format!("{name} has a negative or non-finite entry"),
        });
    }
    let total = sum(p);
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution {
            detail: format!("{name} sums to {total}, expected 1 ± 1e-9"),
        });
    }
    Ok(())
}
