//! Normalized temperature-scaled cross-entropy over paired views.
//!
//! Rows `2i` and `2i + 1` are the two views of sample `i`. Every row is an
//! anchor whose positive is its partner; the remaining `2N - 2` rows are
//! negatives.

use crate::error::{GdaError, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct NtXentOutput<T> {
    pub loss: f64,
    /// d loss / d embeddings, same shape as the input.
    pub grad: Tensor<T>,
}

pub fn nt_xent<T: Scalar>(embeddings: &Tensor<T>, temperature: f64) -> Result<NtXentOutput<T>> {
    if temperature <= 0.0 {
        return Err(GdaError::invalid("temperature must be positive"));
    }
    let shape = embeddings.shape();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) {
        return Err(GdaError::invalid("embeddings must be a [2N, D] matrix"));
    }
    let (m, d) = (shape[0], shape[1]);
    if m < 4 {
        return Err(GdaError::invalid("at least two pairs are required"));
    }
    let mut z = vec![0f64; m * d];
    let mut norms = vec![0f64; m];
    for i in 0..m {
        let row = embeddings.row(i);
        let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(GdaError::invalid(format!("embedding row {i} has zero norm")));
        }
        norms[i] = n;
        for (zj, v) in z[i * d..(i + 1) * d].iter_mut().zip(row) {
            *zj = v.as_f64() / n;
        }
    }
    let dot = |i: usize, j: usize| -> f64 {
        z[i * d..(i + 1) * d]
            .iter()
            .zip(&z[j * d..(j + 1) * d])
            .map(|(a, b)| a * b)
            .sum()
    };

    // coef[i][j] = d loss / d s_ij, with s_ij = z_i . z_j / temperature.
    let mut coef = vec![0f64; m * m];
    let mut loss = 0.0;
    let scale = 1.0 / m as f64;
    for i in 0..m {
        let pos = i ^ 1;
        let logits: Vec<f64> = (0..m)
            .map(|j| if j == i { f64::NEG_INFINITY } else { dot(i, j) / temperature })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[pos];
        for j in 0..m {
            if j != i {
                coef[i * m + j] = (logits[j] - lse).exp() * scale;
            }
        }
        coef[i * m + pos] -= scale;
    }
    loss *= scale;

    let mut gz = vec![0f64; m * d];
    for i in 0..m {
        for j in 0..m {
            let c = (coef[i * m + j] + coef[j * m + i]) / temperature;
            if c == 0.0 {
                continue;
            }
            for k in 0..d {
                gz[i * d + k] += c * z[j * d + k];
            }
        }
    }
    let mut grad = Vec::with_capacity(m * d);
    for i in 0..m {
        let zi = &z[i * d..(i + 1) * d];
        let gi = &gz[i * d..(i + 1) * d];
        let proj: f64 = zi.iter().zip(gi).map(|(a, b)| a * b).sum();
        grad.extend(
            zi.iter()
                .zip(gi)
                .map(|(zk, gk)| T::lit((gk - zk * proj) / norms[i])),
        );
    }
    Ok(NtXentOutput {
        loss,
        grad: Tensor::from_vec(&[m, d], grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    fn random(m: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, &[]);
        Tensor::from_vec(&[m, d], (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identical_embeddings_give_ln3() {
        for t in [0.1, 0.5, 2.0] {
            let e = Tensor::<f64>::full(&[4, 3], 0.7);
            let out = nt_xent(&e, t).unwrap();
            assert!((out.loss - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn antipodal_pairs_closed_form() {
        let e = Tensor::<f64>::from_vec(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]);
        let out = nt_xent(&e, 0.5).unwrap();
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 2.0 / e2)).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.035_976).abs() < 1e-5);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(nt_xent(&Tensor::<f64>::full(&[2, 3], 1.0), 0.5).is_err());
        let mut e = Tensor::<f64>::full(&[4, 3], 1.0);
        e.data_mut()[3..6].fill(0.0);
        assert!(nt_xent(&e, 0.5).is_err());
        assert!(nt_xent(&Tensor::<f64>::full(&[4, 3], 1.0), 0.0).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            let e = random(6, 4, seed);
            let out = nt_xent(&e, 0.5).unwrap();
            let h = 1e-6;
            for idx in 0..e.len() {
                let mut p = e.clone();
                p.data_mut()[idx] += h;
                let mut q = e.clone();
                q.data_mut()[idx] -= h;
                let fd = (nt_xent(&p, 0.5).unwrap().loss - nt_xent(&q, 0.5).unwrap().loss) / (2.0 * h);
                let an = out.grad.data()[idx];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "{fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn invariant_to_pair_order_and_scale(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let e = random(8, 5, seed);
            let base = nt_xent(&e, 0.5).unwrap().loss;
            // Reverse the order of the pairs, keeping each pair together.
            let order = [6usize, 7, 4, 5, 2, 3, 0, 1];
            let permuted = e.gather_rows(&order);
            prop_assert!((nt_xent(&permuted, 0.5).unwrap().loss - base).abs() < 1e-12);
            let mut scaled = e.clone();
            for v in &mut scaled.data_mut()[5..10] {
                *v *= scale;
            }
            prop_assert!((nt_xent(&scaled, 0.5).unwrap().loss - base).abs() < 1e-10);
        }
    }
}
