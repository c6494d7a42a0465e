use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdaError, Result};
use crate::image::{to_batch, Image};
use crate::nn::{
    checkpoint, BatchNorm, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2, Relu, Sequential,
    Tensor,
};

/// Feature extractor used for domain estimation:
/// four 3x3 conv blocks (conv, ReLU, batch norm) with a 2x2 max pool after
/// the second and fourth, global average pooling, then `fc + ReLU + BN + fc`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_widths: [usize; 4],
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            conv_widths: [16, 32, 64, 64],
            hidden: 64,
            embed_dim: 64,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(GdaError::invalid("encoder in_channels must be 1 or 3"));
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(GdaError::invalid("encoder image_size must be a positive multiple of 4"));
        }
        if self.conv_widths.contains(&0) || self.hidden == 0 || self.embed_dim == 0 {
            return Err(GdaError::invalid("encoder widths must be positive"));
        }
        Ok(())
    }

    pub fn build(&self, rng: &mut ChaCha8Rng) -> Sequential<f32> {
        let [c1, c2, c3, c4] = self.conv_widths;
        let block = |net: Sequential<f32>, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            net.push(Conv2d::new(cin, cout, 3, 1, 1, rng))
                .push(Relu::default())
                .push(BatchNorm::new(cout))
        };
        let mut net = Sequential::new();
        net = block(net, self.in_channels, c1, rng);
        net = block(net, c1, c2, rng).push(MaxPool2::default());
        net = block(net, c2, c3, rng);
        net = block(net, c3, c4, rng)
            .push(MaxPool2::default())
            .push(GlobalAvgPool::default());
        net.push(Linear::new(c4, self.hidden, rng))
            .push(Relu::default())
            .push(BatchNorm::new(self.hidden))
            .push(Linear::new(self.hidden, self.embed_dim, rng))
    }
}

pub struct Encoder {
    pub spec: EncoderSpec,
    pub net: Sequential<f32>,
}

pub const ENCODER_KIND: &str = "encoder";

impl Encoder {
    pub fn new(spec: EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let net = spec.build(rng);
        Ok(Self { spec, net })
    }

    pub fn batch(&self, images: &[&Image]) -> Tensor<f32> {
        to_batch(images.iter().copied(), self.spec.in_channels, self.spec.image_size)
    }

    /// Eval-mode embeddings, one row per image.
    pub fn embed(&mut self, images: &[&Image], batch_size: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let y = self.net.forward(self.batch(chunk), false);
            for i in 0..chunk.len() {
                out.push(y.row(i).iter().map(|&v| f64::from(v)).collect());
            }
        }
        out
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.spec)?;
        checkpoint::save(path, ENCODER_KIND, &meta, &mut self.net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = checkpoint::load_raw(path)?;
        if raw.kind != ENCODER_KIND {
            return Err(GdaError::Checkpoint(format!(
                "expected an {ENCODER_KIND} checkpoint, found `{}`",
                raw.kind
            )));
        }
        let spec: EncoderSpec = serde_json::from_value(raw.metadata.clone())?;
        let mut enc = Encoder::new(spec, &mut crate::rng::stream(0, &[]))?;
        checkpoint::restore(&raw, &mut enc.net)?;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn output_is_embed_dim_and_checkpoint_round_trips() {
        let mut enc = Encoder::new(EncoderSpec::default(), &mut stream(1, &[])).unwrap();
        let img = Image::filled(1, 20, 20, 0.3).unwrap();
        let e = enc.embed(&[&img, &img], 8);
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].len(), 64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.ckpt");
        enc.save(&p).unwrap();
        let mut back = Encoder::load(&p).unwrap();
        assert_eq!(back.embed(&[&img], 8), e[..1].to_vec());
    }
}
