pub mod dataset;
pub mod destructor;
pub mod error;
pub mod harness;
pub mod estimator;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod problem;
pub mod rng;
pub mod synthgen;
pub mod trainer;
