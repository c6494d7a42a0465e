//! Two-phase adversarial training loop, prediction and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{BatchTargets, ClassifierSpec, DannModel};
use super::pseudo::{init_pseudo_labels, median, update_pseudo_label, PseudoLabel};
use super::schedule::{entropy, lambda_schedule};
use crate::dataset::BlindedView;
use crate::error::{GdaError, Result};
use crate::image::{to_batch, Image};
use crate::nn::loss::{argmax, softmax_rows};
use crate::nn::{checkpoint, zero_grad, Sgd, Tensor};
use crate::problem::Target;
use crate::rng::stream;

const STREAM_ORDER: u64 = 12;
const STREAM_PSEUDO: u64 = 13;
const EVAL_BATCH: usize = 128;
pub const CLASSIFIER_KIND: &str = "classifier";

/// Class prior for the regularizer, over the `K + 1` outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Uniform,
    /// Ground-truth class distribution; the caller must resolve it to
    /// `Weights` before training.
    TrueDistribution,
    Weights(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PriorRepr {
    Name(String),
    Weights(Vec<f64>),
}

impl Serialize for Prior {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Prior::Uniform => PriorRepr::Name("uniform".into()),
            Prior::TrueDistribution => PriorRepr::Name("true".into()),
            Prior::Weights(w) => PriorRepr::Weights(w.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Prior {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PriorRepr::deserialize(d)? {
            PriorRepr::Name(n) if n == "uniform" => Ok(Prior::Uniform),
            PriorRepr::Name(n) if n == "true" => Ok(Prior::TrueDistribution),
            PriorRepr::Name(n) => Err(serde::de::Error::custom(format!(
                "unknown prior `{n}` (expected \"uniform\", \"true\" or a list of weights)"
            ))),
            PriorRepr::Weights(w) => Ok(Prior::Weights(w)),
        }
    }
}

impl Prior {
    pub fn resolve(&self, outputs: usize) -> Result<Vec<f64>> {
        match self {
            Prior::Uniform => Ok(vec![1.0 / outputs as f64; outputs]),
            Prior::TrueDistribution => Err(GdaError::invalid(
                "prior `true` must be resolved from ground truth before training",
            )),
            Prior::Weights(w) => {
                if w.len() != outputs {
                    return Err(GdaError::invalid(format!(
                        "prior has {} entries, model has {outputs} outputs",
                        w.len()
                    )));
                }
                let sum: f64 = w.iter().sum();
                if w.iter().any(|v| *v <= 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                    return Err(GdaError::invalid("prior entries must be positive and sum to 1"));
                }
                Ok(w.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub pseudo_init_epoch: usize,
    pub pseudo_update_epoch: usize,
    /// Refresh pseudo-labels every epoch after the update epoch, not only at it.
    pub refresh_every_epoch: bool,
    pub prior: Prior,
    pub lp_weight: f64,
    /// When false the domain head still trains but no gradient is reversed.
    pub adversarial: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma: 10.0,
            pseudo_init_epoch: 13,
            pseudo_update_epoch: 26,
            refresh_every_epoch: true,
            prior: Prior::TrueDistribution,
            lp_weight: 1.0,
            adversarial: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(GdaError::invalid("epochs must be positive and batch_size at least 2"));
        }
        if !(self.pseudo_init_epoch < self.pseudo_update_epoch && self.pseudo_update_epoch <= self.epochs) {
            return Err(GdaError::invalid(
                "need pseudo_init_epoch < pseudo_update_epoch <= epochs",
            ));
        }
        if self.learning_rate <= 0.0 || self.gamma <= 0.0 {
            return Err(GdaError::invalid("learning_rate and gamma must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lp_weight < 0.0 {
            return Err(GdaError::invalid(
                "momentum must be in [0,1); weight_decay and lp_weight non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_y: f64,
    pub loss_d: f64,
    pub loss_p: f64,
    pub lambda: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.epochs {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierMeta {
    spec: ClassifierSpec,
    known_classes: Vec<u32>,
    num_domains: usize,
    unk_trained: bool,
}

pub struct TrainedModel {
    pub model: DannModel<f32>,
    /// Ascending original ids of the known classes; output `i` is class
    /// `known_classes[i]`, output `K` is UNK.
    pub known_classes: Vec<u32>,
    /// False until the UNK output has received supervision; prediction then
    /// reads only the known outputs.
    pub unk_trained: bool,
    pub log: TrainLog,
    pub pseudo_labels: BTreeMap<usize, PseudoLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Probabilities over the `K + 1` outputs.
    pub probs: Vec<f64>,
    /// Index in `[0, K]`.
    pub label: usize,
}

impl TrainedModel {
    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn target(&self, label: usize) -> Target {
        self.known_classes
            .get(label)
            .map_or(Target::Unknown, |&c| Target::Known(c))
    }

    fn batch(&self, images: &[&Image]) -> Tensor<f32> {
        let s = &self.model.spec;
        to_batch(images.iter().copied(), s.in_channels, s.image_size)
    }

    fn probabilities(&mut self, images: &[&Image], active: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let x = self.batch(chunk);
            out.extend(softmax_rows(&self.model.class_logits(x), active));
        }
        out
    }

    /// Argmax over `K + 1` outputs (ties to the lowest index).
    pub fn predict(&mut self, images: &[&Image]) -> Vec<Prediction> {
        let active = if self.unk_trained {
            self.num_known() + 1
        } else {
            self.num_known()
        };
        self.probabilities(images, active)
            .into_iter()
            .map(|probs| Prediction {
                label: argmax(&probs),
                probs,
            })
            .collect()
    }

    /// Softmax over the known outputs; samples whose entropy strictly exceeds
    /// the median entropy of the evaluated set are rejected as UNK.
    pub fn predict_with_entropy_rejection(&mut self, images: &[&Image]) -> Result<Vec<Prediction>> {
        let k = self.num_known();
        let probs = self.probabilities(images, k);
        let known: Vec<&[f64]> = probs.iter().map(|p| &p[..k]).collect();
        let h: Vec<f64> = known.iter().map(|p| entropy(p)).collect::<Result<_>>()?;
        if h.is_empty() {
            return Ok(Vec::new());
        }
        let sigma = median(&h);
        Ok(probs
            .into_iter()
            .zip(h)
            .map(|(p, hi)| Prediction {
                label: if hi > sigma { k } else { argmax(&p[..k]) },
                probs: p,
            })
            .collect())
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(ClassifierMeta {
            spec: self.model.spec.clone(),
            known_classes: self.known_classes.clone(),
            num_domains: self.model.num_domains,
            unk_trained: self.unk_trained,
        })?;
        checkpoint::save(path, CLASSIFIER_KIND, &meta, &mut self.model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = checkpoint::load_raw(path)?;
        if raw.kind != CLASSIFIER_KIND {
            return Err(GdaError::Checkpoint(format!(
                "expected a {CLASSIFIER_KIND} checkpoint, found `{}`",
                raw.kind
            )));
        }
        let meta: ClassifierMeta = serde_json::from_value(raw.metadata.clone())?;
        let mut model = DannModel::new(meta.spec, meta.known_classes.len(), meta.num_domains, 0)?;
        checkpoint::restore(&raw, &mut model)?;
        Ok(Self {
            model,
            known_classes: meta.known_classes,
            unk_trained: meta.unk_trained,
            log: TrainLog::default(),
            pseudo_labels: BTreeMap::new(),
        })
    }
}

/// Split `items` into chunks of `size`, folding a trailing singleton into
/// the previous chunk so every chunk has at least two entries.
fn batches(items: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < items.len() {
        let mut end = (start + size).min(items.len());
        if items.len() - end == 1 {
            end = items.len();
        }
        out.push(&items[start..end]);
        start = end;
    }
    out
}

/// Train on a blinded view. `domains[i]` is the (estimated) domain of sample
/// `i` in `0..num_domains`; `prior` must already be resolved.
pub fn train_dann(
    view: &BlindedView<'_>,
    domains: &[usize],
    num_domains: usize,
    spec: &ClassifierSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let n = view.len();
    if domains.len() != n {
        return Err(GdaError::invalid(format!(
            "domain estimate covers {} samples, dataset has {n}",
            domains.len()
        )));
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= num_domains) {
        return Err(GdaError::invalid(format!("domain index {d} >= {num_domains}")));
    }
    let visible: Vec<Option<u32>> = (0..n).map(|i| view.class_label_opt(i)).collect();
    let known: Vec<u32> = {
        let mut k: Vec<u32> = visible.iter().flatten().copied().collect();
        k.sort_unstable();
        k.dedup();
        k
    };
    if known.is_empty() {
        return Err(GdaError::invalid("no labeled samples"));
    }
    let k = known.len();
    let labeled: Vec<Option<usize>> = visible
        .iter()
        .map(|c| c.map(|c| known.binary_search(&c).expect("collected above")))
        .collect();
    let unlabeled: Vec<usize> = (0..n).filter(|&i| labeled[i].is_none()).collect();
    let prior = if cfg.lp_weight > 0.0 && !unlabeled.is_empty() {
        Some(cfg.prior.resolve(k + 1)?)
    } else {
        None
    };

    let all = to_batch((0..n).map(|i| view.image(i)), spec.in_channels, spec.image_size);
    let mut model = DannModel::<f32>::new(spec.clone(), k, num_domains, cfg.seed)?;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut pseudo: BTreeMap<usize, PseudoLabel> = BTreeMap::new();
    let mut unk_trained = false;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let steps_per_epoch = batches(&order, cfg.batch_size).len();
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;

    let eval_probs = |model: &mut DannModel<f32>, idx: &[usize], active: usize| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(EVAL_BATCH) {
            out.extend(softmax_rows(&model.class_logits(all.gather_rows(chunk)), active));
        }
        out
    };

    for epoch in 0..cfg.epochs {
        let phase2 = !unlabeled.is_empty() && epoch >= cfg.pseudo_init_epoch;
        if phase2 && epoch == cfg.pseudo_init_epoch {
            let mut pool = unlabeled.clone();
            pool.shuffle(&mut stream(cfg.seed, &[STREAM_PSEUDO]));
            for chunk in batches(&pool, cfg.batch_size) {
                let probs = eval_probs(&mut model, chunk, k);
                let known_probs: Vec<Vec<f64>> = probs.into_iter().map(|mut p| {
                    p.truncate(k);
                    p
                }).collect();
                let labels = if chunk.len() >= 2 {
                    init_pseudo_labels(&known_probs)?
                } else {
                    known_probs.iter().map(|p| PseudoLabel {
                        label: argmax(p),
                        provenance: super::pseudo::Provenance::EntropyInit,
                    }).collect()
                };
                pseudo.extend(chunk.iter().copied().zip(labels));
            }
            let unk = pseudo.values().filter(|p| p.label == k).count();
            info!("epoch {epoch}: initialised {} pseudo-labels ({unk} UNK)", pseudo.len());
        }
        let refresh = epoch == cfg.pseudo_update_epoch
            || (cfg.refresh_every_epoch && epoch > cfg.pseudo_update_epoch);
        if phase2 && refresh {
            let probs = eval_probs(&mut model, &unlabeled, k + 1);
            for (&i, p) in unlabeled.iter().zip(&probs) {
                pseudo.insert(i, update_pseudo_label(p));
            }
        }

        order.shuffle(&mut stream(cfg.seed, &[STREAM_ORDER, epoch as u64]));
        let (active, prior_term) = if phase2 {
            (k + 1, prior.as_deref().map(|p| (p, cfg.lp_weight)))
        } else {
            (k, None)
        };
        let mut sums = [0f64; 3];
        let (mut counted, mut correct) = (0usize, 0usize);
        let mut lambda = 0.0;
        let batch_list = batches(&order, cfg.batch_size);
        let nb = batch_list.len() as f64;
        for (step, idx) in batch_list.into_iter().enumerate() {
            let progress = (epoch * steps_per_epoch + step) as f64 / total_steps;
            lambda = if cfg.adversarial {
                lambda_schedule(progress, cfg.gamma)
            } else {
                0.0
            };
            model.set_lambda(lambda);
            let class_targets: Vec<Option<usize>> = idx
                .iter()
                .map(|&i| labeled[i].or_else(|| if phase2 { pseudo.get(&i).map(|p| p.label) } else { None }))
                .collect();
            let domain_targets: Vec<usize> = idx.iter().map(|&i| domains[i]).collect();
            zero_grad(&mut model);
            let s = model.forward_backward(
                all.gather_rows(idx),
                &BatchTargets {
                    class_targets: &class_targets,
                    active_classes: active,
                    domain_targets: &domain_targets,
                    prior: prior_term,
                },
            );
            opt.step(&mut model);
            sums[0] += s.loss_y / nb;
            sums[1] += s.loss_d / nb;
            sums[2] += s.loss_p / nb;
            counted += s.counted;
            correct += s.correct;
        }
        unk_trained |= phase2;
        let row = EpochLog {
            epoch,
            loss_y: sums[0],
            loss_d: sums[1],
            loss_p: sums[2],
            lambda,
            train_acc: if counted > 0 { correct as f64 / counted as f64 } else { 0.0 },
        };
        info!(
            "epoch {epoch}: loss_y {:.4} loss_d {:.4} loss_p {:.4} lambda {:.3} acc {:.3}",
            row.loss_y, row.loss_d, row.loss_p, row.lambda, row.train_acc
        );
        log.epochs.push(row);
    }
    Ok(TrainedModel {
        model,
        known_classes: known,
        unk_trained,
        log,
        pseudo_labels: pseudo,
    })
}
