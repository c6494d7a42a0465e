//! Minimal CPU layer library: NCHW tensors, hand-written backward passes,
//! optimisers and checkpoints. Single-threaded and bit-deterministic.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod tensor;

pub use conv::Conv2d;
pub use layers::{
    param_count, snapshot, zero_grad, Dropout, Flatten, GlobalAvgPool, GradReverse, Layer,
    LeakyRelu, Linear, MaxPool2, Module, Param, Relu, Sequential,
};
pub use norm::{BatchNorm, InstanceNorm};
pub use optim::{Adam, Sgd};
pub use tensor::{gemm, MatRef, Scalar, Tensor};
