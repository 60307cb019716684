//! Plain (non-tape) vector operations shared across the crate.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped into `[-1, 1]`. Zero-norm inputs are an error:
/// a zero embedding signals an upstream bug and must not read as "orthogonal".
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_sim: {} vs {} entries",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax with max-subtraction.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &crate::smallnet::Matrix) -> crate::smallnet::Matrix {
    let mut out = crate::smallnet::Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    out
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|&x| x - lse).collect()
}

/// `KL(softmax(p_logits) || softmax(q_logits))`, non-negative, zero iff the
/// softmaxes coincide.
pub fn kl_from_logits(p_logits: &[f64], q_logits: &[f64]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::Shape(format!(
            "kl_from_logits: {} vs {} entries",
            p_logits.len(),
            q_logits.len()
        )));
    }
    let p = softmax(p_logits);
    let lq = log_softmax(q_logits);
    let mut kl = 0.0;
    for (pi, (plog, ql)) in p.iter().zip(log_softmax(p_logits).iter().zip(&lq)) {
        if *pi > 0.0 {
            kl += pi * (plog - ql);
        }
    }
    Ok(kl.max(0.0))
}
