//! Value-level helpers on plain slices, used for scoring and validation.

use crate::error::{Error, Result};

/// Floor applied to the second argument of [`kl_divergence`] before logs.
pub const EPS_KL: f64 = 1e-8;

const NORMALIZATION_TOL: f64 = 1e-9;

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Checks that `p` is a nonnegative vector summing to 1.
pub fn validate_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::validation(format!("{what} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::validation(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::validation(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(p‖q) = Σ p·ln(p/q)` with `q` floored at [`EPS_KL`]; terms with `p = 0` vanish.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_distribution(p, "p")?;
    validate_distribution(q, "q")?;
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    let kl = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(EPS_KL).ln()))
        .sum::<f64>();
    // Exact zero on equal inputs; clip roundoff below zero.
    Ok(kl.max(0.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; errors on (near-)zero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if !(na > 1e-12 && nb > 1e-12) {
        return Err(Error::Degenerate(format!(
            "cosine of a zero-norm vector (norms {na}, {nb})"
        )));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
