//! Log-space numeric helpers. All probability arithmetic in the crate stays in
//! natural-log space; probabilities only materialize when normalizing.

use crate::error::{Error, Result};
use alloc::vec::Vec;

/// `ln Σ exp(v_i)` with max-subtraction. Returns `-inf` when every entry is
/// `-inf` (or the slice is empty).
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

/// Softmax of log-scores: `w_i = exp(s_i - lse(s))`, order preserved.
pub fn normalize_log_weights(log_scores: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_scores);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateSupport);
    }
    Ok(log_scores.iter().map(|&s| libm::exp(s - lse)).collect())
}

/// In-place log-softmax of a logit vector.
pub(crate) fn log_softmax_in_place(logits: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for v in logits.iter_mut() {
        *v -= lse;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
