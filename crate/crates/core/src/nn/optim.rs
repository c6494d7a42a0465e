//! First-order optimisers. State is keyed by parameter visit order, so an
//! optimiser must always be stepped against the same module.

use super::layers::{Module, Param};
use super::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let lr = T::lit(self.lr / bc1);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let moments = &mut self.moments;
        let mut idx = 0;
        module.visit_params(&mut |p: &mut Param<T>| {
            if moments.len() <= idx {
                moments.push((vec![T::zero(); p.value.len()], vec![T::zero(); p.value.len()]));
            }
            let (m, v) = &mut moments[idx];
            let grads = p.grad.data();
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1t * *mi + one_b1 * *g;
                *vi = b2t * *vi + one_b2 * *g * *g;
                *w -= lr * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay
/// folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module<T>) {
        let (lr, mu, wd) = (
            T::lit(self.lr),
            T::lit(self.momentum),
            T::lit(self.weight_decay),
        );
        let velocity = &mut self.velocity;
        let mut idx = 0;
        module.visit_params(&mut |p: &mut Param<T>| {
            if velocity.len() <= idx {
                velocity.push(vec![T::zero(); p.value.len()]);
            }
            let vel = &mut velocity[idx];
            let grads = p.grad.data();
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(grads).zip(vel.iter_mut()) {
                let d = *g + wd * *w;
                *v = mu * *v + d;
                *w -= lr * *v;
            }
            idx += 1;
        });
    }
}
