//! Contrastive pretraining on class-destroyed views.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderSpec};
use super::ntxent::nt_xent;
use crate::dataset::BlindedView;
use crate::destructor::{make_views, AugmentConfig, GridSpec};
use crate::error::{GdaError, Result};
use crate::image::to_batch;
use crate::nn::{zero_grad, Adam, Layer};
use crate::rng::stream;

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_VIEWS: u64 = 3;
const STREAM_SUBSET: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub grid: GridSpec,
    pub augment: AugmentConfig,
    /// Train on a seeded random subset of at most this many samples
    /// (features are still extracted for every sample).
    pub max_train_samples: Option<usize>,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            batch_size: 64,
            epochs: 8,
            learning_rate: 1e-3,
            grid: GridSpec::default(),
            augment: AugmentConfig::default(),
            max_train_samples: Some(600),
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(GdaError::invalid("temperature must be positive"));
        }
        if self.batch_size < 2 {
            return Err(GdaError::invalid("ssl batch_size must be at least 2"));
        }
        if self.learning_rate <= 0.0 {
            return Err(GdaError::invalid("learning_rate must be positive"));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SslLog {
    pub epoch_losses: Vec<f64>,
}

/// Fresh encoder for `spec` initialised from the config seed.
pub fn init_encoder(spec: &EncoderSpec, cfg: &SslConfig) -> Result<Encoder> {
    Encoder::new(spec.clone(), &mut stream(cfg.seed, &[STREAM_INIT]))
}

/// Train an encoder without touching any label.
pub fn train_ssl(view: &BlindedView<'_>, spec: &EncoderSpec, cfg: &SslConfig) -> Result<(Encoder, SslLog)> {
    cfg.validate()?;
    let mut enc = init_encoder(spec, cfg)?;
    let mut log = SslLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    if cfg.epochs == 0 {
        return Ok((enc, log));
    }
    if view.len() < 2 {
        return Err(GdaError::invalid("contrastive training needs at least two samples"));
    }
    let mut pool: Vec<usize> = (0..view.len()).collect();
    if let Some(max) = cfg.max_train_samples {
        if max < pool.len() {
            pool.shuffle(&mut stream(cfg.seed, &[STREAM_SUBSET]));
            pool.truncate(max.max(2));
            pool.sort_unstable();
        }
    }
    let mut opt = Adam::new(cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let mut order = pool.clone();
        order.shuffle(&mut stream(cfg.seed, &[STREAM_ORDER, epoch as u64]));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(2 * chunk.len());
            for &i in chunk {
                let mut rng = stream(cfg.seed, &[STREAM_VIEWS, epoch as u64, i as u64]);
                let (a, b) = make_views(view.image(i), cfg.grid, &cfg.augment, &mut rng)?;
                views.push(a);
                views.push(b);
            }
            let x = to_batch(views.iter(), spec.in_channels, spec.image_size);
            zero_grad(&mut enc.net);
            let z = enc.net.forward(x, true);
            let out = nt_xent(&z, cfg.temperature)?;
            enc.net.backward(out.grad);
            opt.step(&mut enc.net);
            total += out.loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        info!("ssl epoch {} loss {:.4}", epoch + 1, mean);
        log.epoch_losses.push(mean);
    }
    Ok((enc, log))
}
