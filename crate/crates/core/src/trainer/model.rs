//! Class classifier with a gradient-reversed domain head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::prior_regularizer_grad;
use crate::error::{GdaError, Result};
use crate::nn::loss::{masked_cross_entropy, softmax_rows};
use crate::nn::{
    BatchNorm, Conv2d, Dropout, Flatten, GradReverse, InstanceNorm, Layer, LeakyRelu, Linear,
    Module, Param, Relu, Scalar, Sequential, Tensor,
};
use crate::rng::stream;

/// Feature extractor: input instance norm, two 5x5 convs, two stride-2 3x3
/// convs (each followed by leaky ReLU and batch norm), dropout, flatten.
/// Class head: `(fc + ReLU + BN) x2, fc(K+1)`. Domain head: GRL, then
/// `(fc + ReLU + BN + dropout) x2, fc(#domains)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_widths: [usize; 4],
    pub head_width: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            conv_widths: [16, 16, 32, 32],
            head_width: 100,
            dropout: 0.2,
            leaky_slope: 0.1,
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(GdaError::invalid("classifier in_channels must be 1 or 3"));
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(GdaError::invalid("classifier image_size must be a positive multiple of 4"));
        }
        if self.conv_widths.contains(&0) || self.head_width == 0 {
            return Err(GdaError::invalid("classifier widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.leaky_slope < 0.0 {
            return Err(GdaError::invalid("dropout must be in [0,1) and leaky_slope non-negative"));
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        let s = self.image_size / 4;
        self.conv_widths[3] * s * s
    }
}

/// Per-batch targets. `class_targets` index into the active class outputs.
pub struct BatchTargets<'a> {
    pub class_targets: &'a [Option<usize>],
    pub active_classes: usize,
    pub domain_targets: &'a [usize],
    /// `(prior over the active outputs, weight)`.
    pub prior: Option<(&'a [f64], f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub loss_y: f64,
    pub loss_d: f64,
    pub loss_p: f64,
    pub counted: usize,
    pub correct: usize,
}

pub struct DannModel<T: Scalar> {
    pub spec: ClassifierSpec,
    pub num_known: usize,
    pub num_domains: usize,
    pub features: Sequential<T>,
    pub class_head: Sequential<T>,
    pub grl: GradReverse,
    pub domain_head: Sequential<T>,
}

impl<T: Scalar> DannModel<T> {
    pub fn new(spec: ClassifierSpec, num_known: usize, num_domains: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if num_known == 0 || num_domains == 0 {
            return Err(GdaError::invalid("need at least one known class and one domain"));
        }
        let mut rng = stream(seed, &[10]);
        let drop = |k: u64| Dropout::new(spec.dropout, stream(seed, &[11, k]));
        let [c1, c2, c3, c4] = spec.conv_widths;
        let act = || LeakyRelu::new(spec.leaky_slope);
        let features = Sequential::new()
            .push(InstanceNorm::new())
            .push(Conv2d::new(spec.in_channels, c1, 5, 1, 2, &mut rng))
            .push(act())
            .push(BatchNorm::new(c1))
            .push(Conv2d::new(c1, c2, 5, 1, 2, &mut rng))
            .push(act())
            .push(BatchNorm::new(c2))
            .push(Conv2d::new(c2, c3, 3, 2, 1, &mut rng))
            .push(act())
            .push(BatchNorm::new(c3))
            .push(Conv2d::new(c3, c4, 3, 2, 1, &mut rng))
            .push(act())
            .push(BatchNorm::new(c4))
            .push(drop(0))
            .push(Flatten::default());
        let (f, h) = (spec.feature_dim(), spec.head_width);
        let class_head = Self::head(f, h, num_known + 1, &mut rng, None);
        let domain_head = Self::head(f, h, num_domains, &mut rng, Some((drop(1), drop(2))));
        Ok(Self {
            spec,
            num_known,
            num_domains,
            features,
            class_head,
            grl: GradReverse::new(0.0),
            domain_head,
        })
    }

    fn head(
        inputs: usize,
        width: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
        dropout: Option<(Dropout, Dropout)>,
    ) -> Sequential<T> {
        let mut net = Sequential::new();
        let mut drops = dropout.map(|(a, b)| [a, b].into_iter());
        for i in 0..2 {
            net = net
                .push(Linear::new(if i == 0 { inputs } else { width }, width, rng))
                .push(Relu::default())
                .push(BatchNorm::new(width));
            if let Some(d) = drops.as_mut().and_then(Iterator::next) {
                net = net.push(d);
            }
        }
        net.push(Linear::new(width, outputs, rng))
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.grl.set_lambda(lambda);
    }

    /// Eval-mode class logits, `[N, K+1]`.
    pub fn class_logits(&mut self, x: Tensor<T>) -> Tensor<T> {
        let f = self.features.forward(x, false);
        self.class_head.forward(f, false)
    }

    /// Forward and backward on one batch; gradients accumulate into the
    /// parameters. Returns the per-term losses.
    pub fn forward_backward(&mut self, x: Tensor<T>, t: &BatchTargets<'_>) -> StepLosses {
        let n = x.dim(0);
        assert_eq!(t.class_targets.len(), n);
        assert_eq!(t.domain_targets.len(), n);
        let f = self.features.forward(x, true);
        let logits_y = self.class_head.forward(f.clone(), true);
        let logits_d = self.domain_head.forward(self.grl.forward(f, true), true);

        let ce = masked_cross_entropy(&logits_y, t.class_targets, t.active_classes);
        let mut grad_y = ce.grad;
        let mut loss_p = 0.0;
        if let Some((prior, weight)) = t.prior {
            assert_eq!(prior.len(), t.active_classes);
            let probs: Vec<Vec<f64>> = softmax_rows(&logits_y, t.active_classes)
                .into_iter()
                .map(|mut r| {
                    r.truncate(t.active_classes);
                    r
                })
                .collect();
            let (value, g) = prior_regularizer_grad(&probs, prior);
            loss_p = value;
            let c = logits_y.dim(1);
            let data = grad_y.data_mut();
            for (i, row) in g.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    data[i * c + j] += T::lit(weight * v);
                }
            }
        }
        let domain_targets: Vec<Option<usize>> = t.domain_targets.iter().map(|&d| Some(d)).collect();
        let ced = masked_cross_entropy(&logits_d, &domain_targets, self.num_domains);

        let mut gf = self.class_head.backward(grad_y);
        let gd = self.grl.backward(self.domain_head.backward(ced.grad));
        gf.add_assign(&gd);
        self.features.backward(gf);
        StepLosses {
            loss_y: ce.loss,
            loss_d: ced.loss,
            loss_p,
            counted: ce.counted,
            correct: ce.correct,
        }
    }
}

impl<T: Scalar> Module<T> for DannModel<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.features.visit_params(f);
        self.class_head.visit_params(f);
        self.domain_head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        self.features.visit_buffers(f);
        self.class_head.visit_buffers(f);
        self.domain_head.visit_buffers(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_grad;
    use rand::Rng;

    fn tiny_spec() -> ClassifierSpec {
        ClassifierSpec {
            in_channels: 1,
            image_size: 8,
            conv_widths: [2, 2, 3, 3],
            head_width: 4,
            dropout: 0.0,
            leaky_slope: 0.1,
        }
    }

    fn composite(model: &mut DannModel<f64>, x: &Tensor<f64>, t: &BatchTargets<'_>, lambda: f64) -> (f64, f64) {
        let s = model.forward_backward(x.clone(), t);
        zero_grad(model);
        (s.loss_y + t.prior.map_or(0.0, |p| p.1) * s.loss_p - lambda * s.loss_d, s.loss_d)
    }

    #[test]
    fn output_widths() {
        let mut m = DannModel::<f32>::new(ClassifierSpec::default(), 4, 2, 0).unwrap();
        let y = m.class_logits(Tensor::zeros(&[3, 3, 32, 32]));
        assert_eq!(y.shape(), &[3, 5]);
        assert!(DannModel::<f32>::new(ClassifierSpec::default(), 0, 2, 0).is_err());
    }

    /// Feature and class-head parameters descend `L_y + w L_p - lambda L_d`;
    /// domain-head parameters descend `L_d`.
    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = stream(5, &[]);
        let mut model = DannModel::<f64>::new(tiny_spec(), 2, 2, 3).unwrap();
        let lambda = 0.6;
        model.set_lambda(lambda);
        let n = 6;
        let x = Tensor::from_vec(&[n, 1, 8, 8], (0..n * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
        let targets = [Some(0), None, Some(2), Some(1), None, Some(0)];
        let domains = [0, 1, 1, 0, 1, 0];
        let prior = [0.4, 0.3, 0.3];
        let t = BatchTargets {
            class_targets: &targets,
            active_classes: 3,
            domain_targets: &domains,
            prior: Some((&prior, 0.8)),
        };
        zero_grad(&mut model);
        model.forward_backward(x.clone(), &t);
        let mut analytic = Vec::new();
        model.visit_params(&mut |p| analytic.push(p.grad.data().to_vec()));
        let split = {
            let mut a = 0;
            model.features.visit_params(&mut |_| a += 1);
            model.class_head.visit_params(&mut |_| a += 1);
            a
        };
        let h = 1e-5;
        let mut checked = 0;
        for (pi, grads) in analytic.iter().enumerate() {
            for j in (0..grads.len()).step_by(grads.len().div_ceil(4)) {
                let eval = |delta: f64, model: &mut DannModel<f64>| {
                    let mut idx = 0;
                    model.visit_params(&mut |p| {
                        if idx == pi {
                            p.value.data_mut()[j] += delta;
                        }
                        idx += 1;
                    });
                    let v = composite(model, &x, &t, lambda);
                    let mut idx = 0;
                    model.visit_params(&mut |p| {
                        if idx == pi {
                            p.value.data_mut()[j] -= delta;
                        }
                        idx += 1;
                    });
                    if pi < split { v.0 } else { v.1 }
                };
                let fd = (eval(h, &mut model) - eval(-h, &mut model)) / (2.0 * h);
                let a = grads[j];
                let scale = fd.abs().max(a.abs()).max(1e-6);
                assert!((fd - a).abs() / scale < 1e-3, "param {pi}[{j}]: fd {fd} analytic {a}");
                checked += 1;
            }
        }
        assert!(checked > 40);
    }
}
