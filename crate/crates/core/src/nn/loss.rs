use super::tensor::{dot, norm};
use crate::error::{Error, Result};

/// Max-shifted `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// `−log softmax(logits)[label]` and its gradient `softmax − one_hot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Index {
            context: "softmax_cross_entropy label".into(),
            index: label,
            bound: logits.len(),
        });
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine_sim of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `g · (x/‖x‖)` w.r.t. `x`, given upstream `g` on the unit vector.
pub fn unit_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let u: Vec<f64> = x.iter().map(|v| v / n).collect();
    let gu = dot(g, &u);
    g.iter().zip(&u).map(|(gi, ui)| (gi - gu * ui) / n).collect()
}
