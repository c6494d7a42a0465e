//! Domain-adversarial classifier training with open-set pseudo-labels.

pub mod model;
pub mod pseudo;
pub mod schedule;
pub mod train;

pub use model::{ClassifierSpec, DannModel};
pub use pseudo::{init_pseudo_labels, PseudoLabel, Provenance};
pub use schedule::{entropy, lambda_schedule, prior_regularizer};
pub use train::{train_dann, Prediction, Prior, TrainConfig, TrainLog, TrainedModel};
