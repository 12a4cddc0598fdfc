use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise `softmax(z / temperature)` with max subtraction.
pub fn softmax_rows(logits: &[f64], classes: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let scaled: Vec<f64> = row.iter().map(|z| z / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

pub fn softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let classes = logits.row_len();
    if logits.shape().len() != 2 || classes == 0 {
        return Err(Error::ShapeMismatch {
            context: "softmax",
            expected: vec![0, 2],
            found: logits.shape().to_vec(),
        });
    }
    Tensor::new(
        logits.shape().to_vec(),
        softmax_rows(logits.data(), classes, temperature),
    )
}

/// Mean negative log-likelihood of `labels` (one-hot or soft rows) under `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    if probs.shape() != labels.shape() || probs.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy",
            expected: probs.shape().to_vec(),
            found: labels.shape().to_vec(),
        });
    }
    let n = probs.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| if y == 0.0 { 0.0 } else { -y * p.max(PROB_FLOOR).ln() })
        .sum();
    Ok(total / n as f64)
}

/// Per-sample cross-entropy gradient with respect to the logits, for
/// `probs = softmax(z / temperature)`.
///
/// Floored probabilities contribute no gradient. `1 - p_k` is formed as the
/// sum of the other probabilities so confident predictions keep their
/// relative precision.
pub(crate) fn cross_entropy_logit_grad(
    probs: &[f64],
    labels: &[f64],
    classes: usize,
    temperature: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(probs.len());
    for (p, y) in probs.chunks_exact(classes).zip(labels.chunks_exact(classes)) {
        let live: Vec<f64> = p
            .iter()
            .zip(y)
            .map(|(&pk, &yk)| if pk >= PROB_FLOOR { yk } else { 0.0 })
            .collect();
        let weight: f64 = live.iter().sum();
        for k in 0..classes {
            let others: f64 = (0..classes).filter(|&j| j != k).map(|j| p[j]).sum();
            let g = p[k] * (weight - live[k]) - live[k] * others;
            grad.push(g / temperature);
        }
    }
    grad
}

/// Per-sample gradient of `p_class` with respect to the logits (temperature 1).
pub(crate) fn prob_logit_grad(probs: &[f64], classes: usize, class: usize) -> Vec<f64> {
    let mut grad = Vec::with_capacity(probs.len());
    for p in probs.chunks_exact(classes) {
        let pc = p[class];
        for k in 0..classes {
            if k == class {
                let others: f64 = (0..classes).filter(|&j| j != class).map(|j| p[j]).sum();
                grad.push(pc * others);
            } else {
                grad.push(-pc * p[k]);
            }
        }
    }
    grad
}
