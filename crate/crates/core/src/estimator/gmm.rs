//! Diagonal-covariance Gaussian mixtures fitted by EM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdaError, Result};
use crate::rng::stream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iter: 200,
            tol: 1e-6,
            variance_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Mean per-sample log-likelihood at the returned parameters.
    pub final_log_likelihood: f64,
    /// Mean per-sample log-likelihood after each EM iteration.
    pub trace: Vec<f64>,
    /// Iterations after which a collapsed component was re-seeded.
    pub reseeds: Vec<usize>,
}

impl MixtureModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn log_joint(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = self.weights[c].max(1e-300).ln();
            for ((xi, mu), var) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
                let d = xi - mu;
                acc -= 0.5 * (LN_2PI + var.ln() + d * d / var);
            }
            *o = acc;
        }
    }

    /// Posterior over components for one point, plus its log-likelihood.
    pub fn posterior(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut lj = vec![0.0; self.k];
        self.log_joint(x, &mut lj);
        let max = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lj.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        (lj.iter().map(|v| (v - lse).exp()).collect(), lse)
    }

    pub fn mean_log_likelihood(&self, data: &[Vec<f64>]) -> f64 {
        data.iter().map(|x| self.posterior(x).1).sum::<f64>() / data.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::nn::loss::argmax(&self.posterior(x).0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first centre uniform, the rest proportional to the
/// squared distance to the nearest chosen centre.
pub fn kmeans_pp<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centres = vec![data[rng.random_range(0..data.len())].clone()];
    let mut dist: Vec<f64> = data.iter().map(|x| sq_dist(x, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..data.len())
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = data.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        centres.push(data[idx].clone());
        for (d, x) in dist.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, centres.last().expect("non-empty")));
        }
    }
    centres
}

fn column_variance(data: &[Vec<f64>], floor: f64) -> Vec<f64> {
    let n = data.len() as f64;
    let dim = data[0].len();
    (0..dim)
        .map(|j| {
            let mean = data.iter().map(|x| x[j]).sum::<f64>() / n;
            let var = data.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
            var.max(floor)
        })
        .collect()
}

fn em_run(data: &[Vec<f64>], k: usize, cfg: &GmmConfig, restart: usize) -> MixtureModel {
    let mut rng = stream(cfg.seed, &[restart as u64]);
    let n = data.len();
    let dim = data[0].len();
    let global_var = column_variance(data, cfg.variance_floor);
    let mut model = MixtureModel {
        k,
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp(data, k, &mut rng),
        variances: vec![global_var.clone(); k],
        final_log_likelihood: f64::NEG_INFINITY,
        trace: Vec::new(),
        reseeds: Vec::new(),
    };
    let mut resp = vec![0f64; n * k];
    let mut ll_point = vec![0f64; n];
    let e_step = |model: &MixtureModel, resp: &mut [f64], ll_point: &mut [f64]| -> f64 {
        let mut total = 0.0;
        for (i, x) in data.iter().enumerate() {
            let (post, ll) = model.posterior(x);
            resp[i * k..(i + 1) * k].copy_from_slice(&post);
            ll_point[i] = ll;
            total += ll;
        }
        total / n as f64
    };
    let mut ll = e_step(&model, &mut resp, &mut ll_point);
    for iter in 0..cfg.max_iter {
        let mut reseeded = false;
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            let weight = nk / n as f64;
            if weight < 1e-8 {
                // Re-seed from the point the current model explains worst.
                let far = (0..n)
                    .min_by(|&a, &b| ll_point[a].total_cmp(&ll_point[b]))
                    .expect("non-empty");
                model.means[c] = data[far].clone();
                model.variances[c] = global_var.clone();
                model.weights[c] = 1.0 / n as f64;
                reseeded = true;
                continue;
            }
            model.weights[c] = weight;
            let mut mean = vec![0f64; dim];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + c];
                for (m, v) in mean.iter_mut().zip(x) {
                    *m += r * v;
                }
            }
            for m in &mut mean {
                *m /= nk;
            }
            let mut var = vec![0f64; dim];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + c];
                for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                    *s += r * (v - m) * (v - m);
                }
            }
            for s in &mut var {
                *s = (*s / nk).max(cfg.variance_floor);
            }
            model.means[c] = mean;
            model.variances[c] = var;
        }
        let wsum: f64 = model.weights.iter().sum();
        for w in &mut model.weights {
            *w /= wsum;
        }
        let next = e_step(&model, &mut resp, &mut ll_point);
        model.trace.push(next);
        if reseeded {
            model.reseeds.push(iter);
        } else if next - ll < cfg.tol {
            ll = next;
            break;
        }
        ll = next;
    }
    model.final_log_likelihood = ll;
    model
}

pub fn fit_gmm(features: &[Vec<f64>], k: usize, cfg: &GmmConfig) -> Result<MixtureModel> {
    if k == 0 {
        return Err(GdaError::invalid("k must be positive"));
    }
    if features.len() < k {
        return Err(GdaError::invalid(format!(
            "{} points cannot support {k} components",
            features.len()
        )));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|x| x.len() != dim) {
        return Err(GdaError::invalid("features must share a positive dimension"));
    }
    let mut best: Option<MixtureModel> = None;
    for r in 0..cfg.restarts.max(1) {
        let m = em_run(features, k, cfg, r);
        if best
            .as_ref()
            .is_none_or(|b| m.final_log_likelihood > b.final_log_likelihood)
        {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn two_clouds(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = stream(seed, &[]);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            let centre = if c == 0 { 5.0 } else { -5.0 };
            for _ in 0..n {
                data.push((0..64).map(|_| centre + noise.sample(&mut rng)).collect());
                labels.push(c);
            }
        }
        (data, labels)
    }

    fn assert_monotone(m: &MixtureModel) {
        for (t, w) in m.trace.windows(2).enumerate() {
            if m.reseeds.contains(&t) || m.reseeds.contains(&(t + 1)) {
                continue;
            }
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood dropped at {t}: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn recovers_two_separated_clouds() {
        let (data, labels) = two_clouds(100, 3);
        let m = fit_gmm(&data, 2, &GmmConfig::default()).unwrap();
        assert_monotone(&m);
        let pred: Vec<usize> = data.iter().map(|x| m.predict(x)).collect();
        let same = pred.iter().zip(&labels).all(|(p, l)| p == l);
        let flipped = pred.iter().zip(&labels).all(|(p, l)| *p == 1 - l);
        assert!(same || flipped);
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_component_is_sample_moments() {
        let (data, _) = two_clouds(20, 4);
        let m = fit_gmm(&data, 1, &GmmConfig::default()).unwrap();
        let var = column_variance(&data, 1e-6);
        for j in 0..64 {
            let mean = data.iter().map(|x| x[j]).sum::<f64>() / data.len() as f64;
            assert!((m.means[0][j] - mean).abs() < 1e-9);
            assert!((m.variances[0][j] - var[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_data_gives_same_fit() {
        let (data, _) = two_clouds(50, 5);
        let m1 = fit_gmm(&data, 2, &GmmConfig::default()).unwrap();
        let doubled: Vec<Vec<f64>> = data.iter().flat_map(|x| [x.clone(), x.clone()]).collect();
        let m2 = fit_gmm(&doubled, 2, &GmmConfig::default()).unwrap();
        let order = |m: &MixtureModel| if m.means[0][0] > m.means[1][0] { [0, 1] } else { [1, 0] };
        for (a, b) in order(&m1).iter().zip(order(&m2)) {
            for j in 0..64 {
                assert!((m1.means[*a][j] - m2.means[b][j]).abs() < 1e-6);
                assert!((m1.variances[*a][j] - m2.variances[b][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(fit_gmm(&[vec![0.0; 3]], 2, &GmmConfig::default()).is_err());
    }

    #[test]
    fn collapsed_components_are_reseeded() {
        // Five identical points and one outlier: extra components collapse.
        let mut data = vec![vec![0.0, 0.0]; 5];
        data.push(vec![10.0, 10.0]);
        let m = fit_gmm(&data, 4, &GmmConfig::default()).unwrap();
        assert!(m.final_log_likelihood.is_finite());
        assert!(m.variances.iter().flatten().all(|v| *v >= 1e-6));
    }
}
