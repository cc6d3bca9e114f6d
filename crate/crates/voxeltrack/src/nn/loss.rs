//! Per-pixel weighted binary cross-entropy on raw score-map logits.

use super::Tensor;
use crate::error::{Error, Result};

/// Numerically stable log(1 + e^x).
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean of `-w * (y * log s(x) + (1 - y) * log(1 - s(x)))` over all pixels,
/// with `s` the logistic function, plus the gradient w.r.t. the logits:
/// `w * (s(x) - y) / n`.
pub fn weighted_bce(logits: &Tensor, labels: &Tensor, weights: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != labels.shape() || logits.shape() != weights.shape() {
        return Err(Error::shape(format!(
            "bce shapes differ: logits {:?}, labels {:?}, weights {:?}",
            logits.shape(),
            labels.shape(),
            weights.shape()
        )));
    }
    let n = logits.len();
    if n == 0 {
        return Err(Error::shape("bce on an empty map"));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let g = grad.data_mut();
    for i in 0..n {
        let x = logits.data()[i];
        if !x.is_finite() {
            return Err(Error::Runtime(format!(
                "non-finite logit {x} at flat index {i}"
            )));
        }
        let y = labels.data()[i];
        let w = weights.data()[i];
        // log s(x) = -softplus(-x), log(1 - s(x)) = -softplus(x).
        loss += w * (y * softplus(-x) + (1.0 - y) * softplus(x));
        g[i] = w * (sigmoid(x) - y) / n as f64;
    }
    Ok((loss / n as f64, grad))
}
