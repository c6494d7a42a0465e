//! Layer trait, parameter containers and the element-wise / pooling layers.
//!
//! Every layer caches what its backward pass needs during `forward`, so a
//! `backward` call must follow the matching `forward` on the same batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, MatRef, Scalar, Tensor};

/// Trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// Anything that owns parameters or persistent buffers.
pub trait Module<T: Scalar> {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}

    /// Non-trainable state that must survive a checkpoint (running statistics).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Tensor<T>)) {}
}

pub trait Layer<T: Scalar>: Module<T> + Send {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Tensor<T>;
    fn backward(&mut self, grad: Tensor<T>) -> Tensor<T>;
}

pub fn zero_grad<T: Scalar>(module: &mut dyn Module<T>) {
    module.visit_params(&mut |p| p.grad.fill(T::zero()));
}

pub fn param_count<T: Scalar>(module: &mut dyn Module<T>) -> usize {
    let mut n = 0;
    module.visit_params(&mut |p| n += p.value.len());
    n
}

/// Flattened copy of every parameter value, in visit order.
pub fn snapshot<T: Scalar>(module: &mut dyn Module<T>) -> Vec<T> {
    let mut out = Vec::new();
    module.visit_params(&mut |p| out.extend_from_slice(p.value.data()));
    module.visit_buffers(&mut |b| out.extend_from_slice(b.data()));
    out
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Ordered chain of layers.
#[derive(Default)]
pub struct Sequential<T: Scalar> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(mut self, layer: impl Layer<T> + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        for l in &mut self.layers {
            l.visit_buffers(f);
        }
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, mut x: Tensor<T>, train: bool) -> Tensor<T> {
        for l in &mut self.layers {
            x = l.forward(x, train);
        }
        x
    }

    fn backward(&mut self, mut grad: Tensor<T>) -> Tensor<T> {
        for l in self.layers.iter_mut().rev() {
            grad = l.backward(grad);
        }
        grad
    }
}

/// Fully connected layer on `[N, in]` inputs.
pub struct Linear<T: Scalar> {
    inputs: usize,
    outputs: usize,
    weight: Param<T>,
    bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: Param::new(uniform_tensor(&[outputs, inputs], bound, rng)),
            bias: Param::new(uniform_tensor(&[outputs], bound, rng)),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, x: Tensor<T>, _train: bool) -> Tensor<T> {
        let n = x.dim(0);
        assert_eq!(x.len(), n * self.inputs, "linear input width");
        let mut out = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), n, self.inputs),
            MatRef::t(self.weight.value.data(), self.inputs, self.outputs),
            T::one(),
            &mut out,
        );
        self.cache = Some(x.reshape(&[n, self.inputs]));
        Tensor::from_vec(&[n, self.outputs], out)
    }

    fn backward(&mut self, grad: Tensor<T>) -> Tensor<T> {
        let x = self.cache.as_ref().expect("forward before backward");
        let n = x.dim(0);
        gemm(
            T::one(),
            MatRef::t(grad.data(), self.outputs, n),
            MatRef::new(x.data(), n, self.inputs),
            T::one(),
            self.weight.grad.data_mut(),
        );
        let gb = self.bias.grad.data_mut();
        for row in grad.data().chunks(self.outputs) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += *g;
            }
        }
        let mut dx = vec![T::zero(); n * self.inputs];
        gemm(
            T::one(),
            MatRef::new(grad.data(), n, self.outputs),
            MatRef::new(self.weight.value.data(), self.outputs, self.inputs),
            T::zero(),
            &mut dx,
        );
        Tensor::from_vec(&[n, self.inputs], dx)
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl<T: Scalar> Module<T> for Relu {}

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&mut self, mut x: Tensor<T>, _train: bool) -> Tensor<T> {
        self.mask.clear();
        self.mask.reserve(x.len());
        for v in x.data_mut() {
            let on = *v > T::zero();
            self.mask.push(on);
            if !on {
                *v = T::zero();
            }
        }
        x
    }

    fn backward(&mut self, mut grad: Tensor<T>) -> Tensor<T> {
        for (g, &on) in grad.data_mut().iter_mut().zip(&self.mask) {
            if !on {
                *g = T::zero();
            }
        }
        grad
    }
}

pub struct LeakyRelu {
    slope: f64,
    mask: Vec<bool>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self {
            slope,
            mask: Vec::new(),
        }
    }
}

impl<T: Scalar> Module<T> for LeakyRelu {}

impl<T: Scalar> Layer<T> for LeakyRelu {
    fn forward(&mut self, mut x: Tensor<T>, _train: bool) -> Tensor<T> {
        let slope = T::lit(self.slope);
        self.mask.clear();
        self.mask.reserve(x.len());
        for v in x.data_mut() {
            let on = *v > T::zero();
            self.mask.push(on);
            if !on {
                *v *= slope;
            }
        }
        x
    }

    fn backward(&mut self, mut grad: Tensor<T>) -> Tensor<T> {
        let slope = T::lit(self.slope);
        for (g, &on) in grad.data_mut().iter_mut().zip(&self.mask) {
            if !on {
                *g *= slope;
            }
        }
        grad
    }
}

/// Inverted dropout with its own deterministic random stream.
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability in [0,1)");
        Self { p, rng, mask: None }
    }
}

impl<T: Scalar> Module<T> for Dropout {}

impl<T: Scalar> Layer<T> for Dropout {
    fn forward(&mut self, mut x: Tensor<T>, train: bool) -> Tensor<T> {
        if !train || self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        for (v, m) in x.data_mut().iter_mut().zip(&mask) {
            *v *= T::lit(*m);
        }
        self.mask = Some(mask);
        x
    }

    fn backward(&mut self, mut grad: Tensor<T>) -> Tensor<T> {
        if let Some(mask) = &self.mask {
            for (g, m) in grad.data_mut().iter_mut().zip(mask) {
                *g *= T::lit(*m);
            }
        }
        grad
    }
}

/// Identity on the forward pass; multiplies the incoming gradient by
/// `-lambda` on the backward pass.
pub struct GradReverse {
    lambda: f64,
}

impl GradReverse {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda >= 0.0, "reversal strength must be non-negative");
        Self { lambda }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        assert!(lambda >= 0.0, "reversal strength must be non-negative");
        self.lambda = lambda;
    }
}

impl<T: Scalar> Module<T> for GradReverse {}

impl<T: Scalar> Layer<T> for GradReverse {
    fn forward(&mut self, x: Tensor<T>, _train: bool) -> Tensor<T> {
        x
    }

    fn backward(&mut self, mut grad: Tensor<T>) -> Tensor<T> {
        let factor = -T::lit(self.lambda);
        grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        grad
    }
}

/// `[N, ...] -> [N, prod(...)]`.
#[derive(Default)]
pub struct Flatten {
    shape: Vec<usize>,
}

impl<T: Scalar> Module<T> for Flatten {}

impl<T: Scalar> Layer<T> for Flatten {
    fn forward(&mut self, x: Tensor<T>, _train: bool) -> Tensor<T> {
        self.shape = x.shape().to_vec();
        let n = x.dim(0);
        let rest = x.len() / n.max(1);
        x.reshape(&[n, rest])
    }

    fn backward(&mut self, grad: Tensor<T>) -> Tensor<T> {
        grad.reshape(&self.shape)
    }
}

/// `[N, C, H, W] -> [N, C]` by spatial averaging.
#[derive(Default)]
pub struct GlobalAvgPool {
    shape: Vec<usize>,
}

impl<T: Scalar> Module<T> for GlobalAvgPool {}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: Tensor<T>, _train: bool) -> Tensor<T> {
        let (n, c) = (x.dim(0), x.dim(1));
        let hw = x.len() / (n * c);
        let inv = T::one() / T::lit(hw as f64);
        let out = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        self.shape = x.shape().to_vec();
        Tensor::from_vec(&[n, c], out)
    }

    fn backward(&mut self, grad: Tensor<T>) -> Tensor<T> {
        let total: usize = self.shape.iter().product();
        let nc = self.shape[0] * self.shape[1];
        let hw = total / nc;
        let inv = T::one() / T::lit(hw as f64);
        let mut dx = Vec::with_capacity(total);
        for &g in grad.data() {
            dx.extend(std::iter::repeat_n(g * inv, hw));
        }
        Tensor::from_vec(&self.shape, dx)
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Default)]
pub struct MaxPool2 {
    shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl<T: Scalar> Module<T> for MaxPool2 {}

impl<T: Scalar> Layer<T> for MaxPool2 {
    fn forward(&mut self, x: Tensor<T>, _train: bool) -> Tensor<T> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = (h / 2, w / 2);
        let src = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        self.argmax.clear();
        self.argmax.reserve(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    self.argmax.push(best);
                }
            }
        }
        self.shape = x.shape().to_vec();
        Tensor::from_vec(&[n, c, ho, wo], out)
    }

    fn backward(&mut self, grad: Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(&self.shape);
        let d = dx.data_mut();
        for (&idx, &g) in self.argmax.iter().zip(grad.data()) {
            d[idx] += g;
        }
        dx
    }
}
