//! 2-D convolution on NCHW tensors, lowered to GEMM through im2col.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, Module, Param};
use super::tensor::{gemm, MatRef, Scalar, Tensor};

pub struct Conv2d<T: Scalar> {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: Geometry, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: Geometry, dx: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |len: usize| -> Vec<T> {
            (0..len)
                .map(|_| T::lit(rng.random_range(-bound..bound)))
                .collect()
        };
        let weight = Tensor::from_vec(&[cout, fan_in], draw(cout * fan_in));
        let bias = Tensor::from_vec(&[cout], draw(cout));
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (ho, wo) = self.output_size(h, w);
        Geometry {
            c: self.cin,
            h,
            w,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            ho,
            wo,
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: Tensor<T>, _train: bool) -> Tensor<T> {
        assert_eq!(x.shape().len(), 4, "conv input must be NCHW");
        assert_eq!(x.dim(1), self.cin, "conv input channels");
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let g = self.geometry(h, w);
        let (rows, cols) = (g.rows(), g.cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); n * self.cout * cols];
        let plane_in = self.cin * h * w;
        for (s, dst) in out.chunks_mut(self.cout * cols).enumerate() {
            im2col(&x.data()[s * plane_in..(s + 1) * plane_in], g, &mut col);
            for (o, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(self.bias.value.data()[o]);
            }
            gemm(
                T::one(),
                MatRef::new(self.weight.value.data(), self.cout, rows),
                MatRef::new(&col, rows, cols),
                T::one(),
                dst,
            );
        }
        self.input = Some(x);
        Tensor::from_vec(&[n, self.cout, g.ho, g.wo], out)
    }

    fn backward(&mut self, grad: Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("forward before backward");
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let g = self.geometry(h, w);
        let (rows, cols) = (g.rows(), g.cols());
        let plane_in = self.cin * h * w;
        let mut col = vec![T::zero(); rows * cols];
        let mut dcol = vec![T::zero(); rows * cols];
        let mut dx = vec![T::zero(); x.len()];
        for s in 0..n {
            let gs = &grad.data()[s * self.cout * cols..(s + 1) * self.cout * cols];
            im2col(&x.data()[s * plane_in..(s + 1) * plane_in], g, &mut col);
            gemm(
                T::one(),
                MatRef::new(gs, self.cout, cols),
                MatRef::t(&col, cols, rows),
                T::one(),
                self.weight.grad.data_mut(),
            );
            for (b, chunk) in self.bias.grad.data_mut().iter_mut().zip(gs.chunks(cols)) {
                *b += chunk.iter().copied().sum::<T>();
            }
            gemm(
                T::one(),
                MatRef::t(self.weight.value.data(), rows, self.cout),
                MatRef::new(gs, self.cout, cols),
                T::zero(),
                &mut dcol,
            );
            col2im(&dcol, g, &mut dx[s * plane_in..(s + 1) * plane_in]);
        }
        Tensor::from_vec(x.shape(), dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct nested-loop convolution used as the reference.
    fn naive(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Vec<f64> {
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let wt = conv.weight.value.data();
        let mut out = vec![0.0; n * conv.cout * ho * wo];
        for s in 0..n {
            for o in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.value.data()[o];
                        for c in 0..conv.cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((s * conv.cin + c) * h + iy as usize) * w + ix as usize];
                                    acc += wt[o * conv.cin * k * k + (c * k + ki) * k + kj] * xv;
                                }
                            }
                        }
                        out[((s * conv.cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, stride, pad) in &[(3, 1, 1), (5, 1, 2), (3, 2, 1), (2, 2, 0)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, stride, pad, &mut rng);
            let data = (0..2 * 2 * 7 * 6)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let x = Tensor::from_vec(&[2, 2, 7, 6], data);
            let expect = naive(&x, &conv);
            let got = conv.forward(x, true);
            for (a, b) in got.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 2, 1, &mut rng);
        let data: Vec<f64> = (0..2 * 5 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, 2, 5, 5], data.clone());
        let y = conv.forward(x, true);
        let weights: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx = conv.backward(Tensor::from_vec(y.shape(), weights.clone()));
        let eps = 1e-6;
        for i in 0..data.len() {
            let mut plus = data.clone();
            plus[i] += eps;
            let mut minus = data.clone();
            minus[i] -= eps;
            let f = |v: Vec<f64>, conv: &mut Conv2d<f64>| -> f64 {
                let out = conv.forward(Tensor::from_vec(&[1, 2, 5, 5], v), true);
                out.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
            };
            let fd = (f(plus, &mut conv) - f(minus, &mut conv)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "index {i}");
        }
    }
}
