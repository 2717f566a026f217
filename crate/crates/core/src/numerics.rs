//! Dense-vector kernels shared by every other module.
//!
//! Everything here is a pure function over `f64` slices. Vectors that cross
//! module boundaries are expected to be unit-norm; `l2_normalize` is the one
//! place that enforces it.

use thiserror::Error;

/// Below this norm a vector is treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let n = norm(v);
    if !n.is_finite() || n <= ZERO_NORM {
        return Err(NumericsError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, clamped to `[-1, 1]` against round-off.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na.is_nan() || nb.is_nan() || na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(NumericsError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Max-subtracted softmax. Empty input yields an empty output.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// Index of the largest entry; ties resolve to the lowest index.
///
/// Panics on an empty slice.
pub fn argmax(v: &[f64]) -> usize {
    assert!(!v.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
