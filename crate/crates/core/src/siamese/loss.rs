//! Pair losses with their analytic gradients.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;

/// Per-sample contrastive loss and its derivative with respect to `d`.
pub fn contrastive_loss(d: f64, label: bool, margin: f64) -> Result<(f64, f64)> {
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("contrastive margin must be positive, got {margin}")));
    }
    if !(d >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be non-negative, got {d}")));
    }
    Ok(if label {
        (d * d, 2.0 * d)
    } else {
        let gap = (margin - d).max(0.0);
        (gap * gap, -2.0 * gap)
    })
}

/// Batch-mean contrastive loss; gradients are per distance.
pub fn contrastive_batch(d: &[f64], labels: &[bool], margin: f64) -> Result<(f64, Vec<f64>)> {
    let n = d.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(d.len());
    for (&di, &y) in d.iter().zip(labels) {
        let (l, g) = contrastive_loss(di, y, margin)?;
        loss += l;
        grad.push(g / n);
    }
    Ok((loss / n, grad))
}

/// Per-sample BCE on a probability and its derivative with respect to `p`.
pub fn bce_loss(p: f64, label: bool) -> (f64, f64) {
    let clamped = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let inside = clamped == p;
    if label {
        (-clamped.ln(), if inside { -1.0 / clamped } else { 0.0 })
    } else {
        (-(1.0 - clamped).ln(), if inside { 1.0 / (1.0 - clamped) } else { 0.0 })
    }
}

/// Batch-mean BCE computed from logits, with gradients per logit.
pub fn bce_with_logits_batch(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    crate::backbone::weighted_bce_with_logits(logits, labels, 1.0, 1.0)
}
