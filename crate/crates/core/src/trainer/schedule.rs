//! Scalar pieces of the training objective: the adversarial weight
//! schedule, entropy, and the class-prior regularizer.

use crate::error::{GdaError, Result};

/// `2 / (1 + exp(-gamma * p)) - 1`.
pub fn lambda_schedule(p: f64, gamma: f64) -> f64 {
    2.0 / (1.0 + (-gamma * p).exp()) - 1.0
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(GdaError::invalid("probabilities must be finite and non-negative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(GdaError::invalid(format!("probabilities sum to {total}, not 1")));
    }
    Ok(probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum())
}

const MEAN_FLOOR: f64 = 1e-12;

/// `sum_j prior_j ln(prior_j / mean_j)`, with `mean_j` clamped at 1e-12.
pub fn prior_regularizer(mean_predicted: &[f64], prior: &[f64]) -> f64 {
    assert_eq!(mean_predicted.len(), prior.len());
    prior
        .iter()
        .zip(mean_predicted)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q.max(MEAN_FLOOR)).ln())
        .sum()
}

/// Regularizer on the batch-mean softmax, with its gradient with respect to
/// the logits. `probs` holds one softmax row per sample.
pub fn prior_regularizer_grad(probs: &[Vec<f64>], prior: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let b = probs.len() as f64;
    let m = prior.len();
    let mut mean = vec![0f64; m];
    for row in probs {
        for (q, p) in mean.iter_mut().zip(row) {
            *q += p / b;
        }
    }
    let value = prior_regularizer(&mean, prior);
    let ratio: Vec<f64> = prior
        .iter()
        .zip(&mean)
        .map(|(p, q)| p / q.max(MEAN_FLOOR))
        .collect();
    let grads = probs
        .iter()
        .map(|row| {
            let s: f64 = row.iter().zip(&ratio).map(|(p, r)| p * r).sum();
            row.iter()
                .zip(&ratio)
                .map(|(p, r)| p * (s - r) / b)
                .collect()
        })
        .collect();
    (value, grads)
}
