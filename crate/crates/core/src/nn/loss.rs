//! Softmax and masked cross-entropy. Reductions run in `f64` regardless of
//! the network scalar.

use super::tensor::{Scalar, Tensor};

/// Row-wise softmax over the first `active` columns of a `[N, C]` matrix;
/// inactive columns get probability zero.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, active: usize) -> Vec<Vec<f64>> {
    let c = logits.dim(1);
    assert!(active >= 1 && active <= c);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let max = row[..active]
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, v)| if j < active { (v.as_f64() - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            p
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    /// Mean loss over rows that carry a target (0 when none do).
    pub loss: f64,
    pub grad: Tensor<T>,
    pub counted: usize,
    pub correct: usize,
}

/// Softmax cross-entropy restricted to the first `active` logits. Rows with
/// a `None` target contribute neither loss nor gradient.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[Option<usize>],
    active: usize,
) -> CrossEntropy<T> {
    let (n, c) = (logits.dim(0), logits.dim(1));
    assert_eq!(targets.len(), n);
    let probs = softmax_rows(logits, active);
    let counted = targets.iter().filter(|t| t.is_some()).count();
    let mut grad = vec![T::zero(); n * c];
    let mut loss = 0.0;
    let mut correct = 0;
    if counted > 0 {
        let inv = 1.0 / counted as f64;
        for (i, (p, t)) in probs.iter().zip(targets).enumerate() {
            let Some(t) = *t else { continue };
            assert!(t < active, "target {t} outside active outputs {active}");
            loss -= p[t].max(1e-300).ln() * inv;
            if argmax(&p[..active]) == t {
                correct += 1;
            }
            for j in 0..active {
                let onehot = if j == t { 1.0 } else { 0.0 };
                grad[i * c + j] = T::lit((p[j] - onehot) * inv);
            }
        }
    }
    CrossEntropy {
        loss,
        grad: Tensor::from_vec(&[n, c], grad),
        counted,
        correct,
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.1, 0.5, 0.5, -0.4, 1.0, 0.0];
        let targets = [Some(1), None, Some(0)];
        let base = masked_cross_entropy(&Tensor::from_vec(&[3, 3], logits.clone()), &targets, 2);
        assert_eq!(base.counted, 2);
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p[i] += eps;
            let mut m = logits.clone();
            m[i] -= eps;
            let lp = masked_cross_entropy(&Tensor::from_vec(&[3, 3], p), &targets, 2).loss;
            let lm = masked_cross_entropy(&Tensor::from_vec(&[3, 3], m), &targets, 2).loss;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - base.grad.data()[i]).abs() < 1e-8, "i={i}");
        }
    }

    #[test]
    fn softmax_ignores_inactive_columns() {
        let p = softmax_rows(&Tensor::from_vec(&[1, 3], vec![0.0f32, 0.0, 50.0]), 2);
        assert_eq!(p[0], vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.1, 0.8]), 2);
    }
}
