//! Batch and instance normalisation.

use super::layers::{Layer, Module, Param};
use super::tensor::{Scalar, Tensor};

const EPS: f64 = 1e-5;

/// Per-channel normalisation over batch (and spatial) axes with running
/// statistics for inference. Accepts `[N, C]` or `[N, C, H, W]`.
pub struct BatchNorm<T: Scalar> {
    channels: usize,
    momentum: f64,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

/// Iterate `(channel, index)` over an `[N, C, S]` layout.
fn for_each_channel_index(n: usize, c: usize, s: usize, mut f: impl FnMut(usize, usize)) {
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            for i in 0..s {
                f(ch, base + i);
            }
        }
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            momentum: 0.1,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            cache: None,
        }
    }

    fn layout(&self, shape: &[usize]) -> (usize, usize) {
        assert!(shape.len() >= 2 && shape[1] == self.channels, "batchnorm channels");
        let n = shape[0];
        let spatial = shape[2..].iter().product::<usize>();
        (n, spatial)
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, mut x: Tensor<T>, train: bool) -> Tensor<T> {
        let shape = x.shape().to_vec();
        let (n, s) = self.layout(&shape);
        let c = self.channels;
        let count = (n * s) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut sum = vec![0.0f64; c];
            let data = x.data();
            for_each_channel_index(n, c, s, |ch, i| sum[ch] += data[i].as_f64());
            let mean: Vec<f64> = sum.iter().map(|v| v / count).collect();
            let mut sq = vec![0.0f64; c];
            for_each_channel_index(n, c, s, |ch, i| {
                let d = data[i].as_f64() - mean[ch];
                sq[ch] += d * d;
            });
            let var: Vec<f64> = sq.iter().map(|v| v / count).collect();
            let m = self.momentum;
            for ch in 0..c {
                let unbiased = if count > 1.0 {
                    var[ch] * count / (count - 1.0)
                } else {
                    var[ch]
                };
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = T::lit((1.0 - m) * rm.as_f64() + m * mean[ch]);
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = T::lit((1.0 - m) * rv.as_f64() + m * unbiased);
            }
            (mean, var)
        } else {
            (
                self.running_mean.data().iter().map(|v| v.as_f64()).collect(),
                self.running_var.data().iter().map(|v| v.as_f64()).collect(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + EPS).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        let data = x.data_mut();
        for_each_channel_index(n, c, s, |ch, i| {
            let h = (data[i] - mean_t[ch]) * inv_std[ch];
            xhat[i] = h;
            data[i] = h * gamma[ch] + beta[ch];
        });
        self.cache = Some(BnCache {
            shape,
            xhat,
            inv_std,
            train,
        });
        x
    }

    fn backward(&mut self, mut grad: Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("forward before backward");
        let (n, s) = self.layout(&cache.shape);
        let c = self.channels;
        let count = T::lit((n * s) as f64);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        {
            let g = grad.data();
            for_each_channel_index(n, c, s, |ch, i| {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * cache.xhat[i];
            });
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_gx[ch];
            self.beta.grad.data_mut()[ch] += sum_g[ch];
        }
        let gamma = self.gamma.value.data();
        let g = grad.data_mut();
        if cache.train {
            for_each_channel_index(n, c, s, |ch, i| {
                let scale = gamma[ch] * cache.inv_std[ch] / count;
                g[i] = scale * (count * g[i] - sum_g[ch] - cache.xhat[i] * sum_gx[ch]);
            });
        } else {
            for_each_channel_index(n, c, s, |ch, i| {
                g[i] = g[i] * gamma[ch] * cache.inv_std[ch];
            });
        }
        grad
    }
}

/// Non-affine per-sample, per-channel normalisation of `[N, C, H, W]`.
#[derive(Default)]
pub struct InstanceNorm<T: Scalar> {
    cache: Option<(Vec<T>, Vec<T>, usize)>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Scalar> Module<T> for InstanceNorm<T> {}

impl<T: Scalar> Layer<T> for InstanceNorm<T> {
    fn forward(&mut self, mut x: Tensor<T>, _train: bool) -> Tensor<T> {
        let plane = x.len() / (x.dim(0) * x.dim(1));
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_stds = Vec::with_capacity(x.dim(0) * x.dim(1));
        for chunk in x.data_mut().chunks_mut(plane) {
            let m = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
            let var = chunk
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>()
                / plane as f64;
            let inv = T::lit(1.0 / (var + EPS).sqrt());
            let mt = T::lit(m);
            for v in chunk.iter_mut() {
                *v = (*v - mt) * inv;
                xhat.push(*v);
            }
            inv_stds.push(inv);
        }
        self.cache = Some((xhat, inv_stds, plane));
        x
    }

    fn backward(&mut self, mut grad: Tensor<T>) -> Tensor<T> {
        let (xhat, inv_stds, plane) = self.cache.as_ref().expect("forward before backward");
        let count = T::lit(*plane as f64);
        for (k, chunk) in grad.data_mut().chunks_mut(*plane).enumerate() {
            let xh = &xhat[k * plane..(k + 1) * plane];
            let sum_g: T = chunk.iter().copied().sum();
            let sum_gx: T = chunk.iter().zip(xh).map(|(g, h)| *g * *h).sum();
            let scale = inv_stds[k] / count;
            for (g, h) in chunk.iter_mut().zip(xh) {
                *g = scale * (count * *g - sum_g - *h * sum_gx);
            }
        }
        grad
    }
}
