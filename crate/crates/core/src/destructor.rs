//! Class-destructive grid shuffling and the view augmentations used for
//! contrastive pretraining.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdaError, Result};
use crate::image::Image;

/// `g x g` grid partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridSpec(usize);

impl GridSpec {
    pub fn new(g: usize) -> Result<Self> {
        if g == 0 {
            return Err(GdaError::invalid("grid must be at least 1"));
        }
        Ok(Self(g))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    RandomCrop,
    Grayscale,
    GaussianBlur,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Area fraction of the crop, drawn uniformly.
    pub crop_scale_range: (f64, f64),
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma_range: (f64, f64),
    pub enabled_ops: Vec<AugmentOp>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.5, 1.0),
            grayscale_probability: 0.2,
            blur_probability: 0.0,
            blur_sigma_range: (0.1, 1.5),
            enabled_ops: vec![AugmentOp::RandomCrop, AugmentOp::Grayscale],
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            grayscale_probability: 0.0,
            blur_probability: 0.0,
            blur_sigma_range: (1.0, 1.0),
            enabled_ops: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(GdaError::invalid(format!(
                "crop_scale_range must satisfy 0 < low <= high <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, p) in [
            ("grayscale_probability", self.grayscale_probability),
            ("blur_probability", self.blur_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GdaError::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi) {
            return Err(GdaError::invalid(format!(
                "blur_sigma_range must satisfy 0 < low <= high, got ({slo}, {shi})"
            )));
        }
        Ok(())
    }
}

/// Uniform permutation of the `g*g` blocks.
pub fn draw_permutation<R: Rng + ?Sized>(g: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..g * g).collect();
    perm.shuffle(rng);
    perm
}

/// Rearrange blocks so output slot `s` holds input block `perm[s]`.
/// Blocks are numbered row-major; `g` must divide both sides.
pub fn permute_blocks(image: &Image, g: usize, perm: &[usize]) -> Image {
    let (h, w) = (image.height(), image.width());
    assert!(h % g == 0 && w % g == 0 && perm.len() == g * g);
    let (bh, bw) = (h / g, w / g);
    let mut out = image.clone();
    for c in 0..image.channels() {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for (slot, &block) in perm.iter().enumerate() {
            let (sy, sx) = (block / g * bh, block % g * bw);
            let (dy, dx) = (slot / g * bh, slot % g * bw);
            for r in 0..bh {
                let s0 = (sy + r) * w + sx;
                let d0 = (dy + r) * w + dx;
                dst[d0..d0 + bw].copy_from_slice(&src[s0..s0 + bw]);
            }
        }
    }
    out
}

/// Nearest multiple of `g` to `n` (at least `g`).
pub fn nearest_multiple(n: usize, g: usize) -> usize {
    (((n as f64 / g as f64).round() as usize).max(1)) * g
}

pub fn block_shuffle<R: Rng + ?Sized>(image: &Image, grid: GridSpec, rng: &mut R) -> Result<Image> {
    let g = grid.get();
    let (h, w) = (image.height(), image.width());
    if g > h.min(w) {
        return Err(GdaError::GridTooLarge {
            grid: g,
            height: h,
            width: w,
        });
    }
    let perm = draw_permutation(g, rng);
    if h % g == 0 && w % g == 0 {
        return Ok(permute_blocks(image, g, &perm));
    }
    let (rh, rw) = (nearest_multiple(h, g), nearest_multiple(w, g));
    let shuffled = permute_blocks(&image.resize_nearest(rh, rw), g, &perm);
    Ok(shuffled.resize_nearest(h, w))
}

fn random_crop<R: Rng + ?Sized>(image: &Image, range: (f64, f64), rng: &mut R) -> Image {
    let (h, w) = (image.height(), image.width());
    let area = rng.random_range(range.0..=range.1);
    let side = area.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    image.crop(top, left, ch, cw).resize_nearest(h, w)
}

fn grayscale(image: &Image) -> Image {
    if image.channels() == 1 {
        return image.clone();
    }
    let mut out = image.clone();
    let n = image.height() * image.width();
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    let gray: Vec<f32> = (0..n).map(|i| (r[i] + g[i] + b[i]) / 3.0).collect();
    for c in 0..3 {
        out.plane_mut(c).copy_from_slice(&gray);
    }
    out
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, edges clamped.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (image.height() as isize, image.width() as isize);
    let mut out = image.clone();
    let mut tmp = vec![0f32; (h * w) as usize];
    for c in 0..image.channels() {
        let src = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * f64::from(src[(y * w + xx) as usize]);
                }
                tmp[(y * w + x) as usize] = acc as f32;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * f64::from(tmp[(yy * w + x) as usize]);
                }
                dst[(y * w + x) as usize] = acc as f32;
            }
        }
    }
    out
}

/// Apply the enabled operations in order. The crop always fires when
/// enabled; grayscale and blur each draw their own coin.
pub fn augment<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let mut out = image.clone();
    for op in &cfg.enabled_ops {
        out = match op {
            AugmentOp::RandomCrop => random_crop(&out, cfg.crop_scale_range, rng),
            AugmentOp::Grayscale => {
                if rng.random_bool(cfg.grayscale_probability) {
                    grayscale(&out)
                } else {
                    out
                }
            }
            AugmentOp::GaussianBlur => {
                if rng.random_bool(cfg.blur_probability) {
                    let (lo, hi) = cfg.blur_sigma_range;
                    gaussian_blur(&out, rng.random_range(lo..=hi))
                } else {
                    out
                }
            }
        };
    }
    out
}

/// Two views, each with its own shuffle followed by its own augmentation.
pub fn make_views<R: Rng + ?Sized>(
    image: &Image,
    grid: GridSpec,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let a = augment(&block_shuffle(image, grid, rng)?, cfg, rng);
    let b = augment(&block_shuffle(image, grid, rng)?, cfg, rng);
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest};

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        Image::new(c, h, w, (0..c * h * w).map(|i| i as f32 / (c * h * w) as f32).collect()).unwrap()
    }

    #[test]
    fn grid_one_is_identity() {
        let img = ramp(3, 7, 5);
        let out = block_shuffle(&img, GridSpec::new(1).unwrap(), &mut stream(0, &[])).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn grid_larger_than_image_is_rejected() {
        let img = ramp(1, 3, 8);
        assert!(matches!(
            block_shuffle(&img, GridSpec::new(4).unwrap(), &mut stream(0, &[])),
            Err(GdaError::GridTooLarge { grid: 4, .. })
        ));
        assert!(GridSpec::new(0).is_err());
    }

    #[test]
    fn two_by_two_permutation_example() {
        let img = Image::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = permute_blocks(&img, 2, &[2, 0, 3, 1]);
        assert_eq!(out.data(), &[3.0, 1.0, 4.0, 2.0]);
        // A seed whose draw is (2,0,3,1) must reproduce the same output.
        let seed = (0..10_000u64)
            .find(|&s| draw_permutation(2, &mut stream(s, &[])) == [2, 0, 3, 1])
            .expect("some seed draws the permutation");
        let shuffled = block_shuffle(&img, GridSpec::new(2).unwrap(), &mut stream(seed, &[])).unwrap();
        assert_eq!(shuffled.data(), &[3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn draws_cover_all_24_permutations() {
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..2000u64 {
            let p = draw_permutation(2, &mut stream(s, &[]));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2, 3]);
            seen.insert(p);
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn non_divisible_grid_composes_resamples() {
        let img = ramp(3, 32, 32);
        let grid = GridSpec::new(3).unwrap();
        let out = block_shuffle(&img, grid, &mut stream(5, &[])).unwrap();
        let perm = draw_permutation(3, &mut stream(5, &[]));
        let oracle = permute_blocks(&img.resize_nearest(33, 33), 3, &perm).resize_nearest(32, 32);
        assert_eq!(out, oracle);
        assert_eq!((out.height(), out.width()), (32, 32));
    }

    #[test]
    fn identity_augmentation() {
        let img = ramp(3, 8, 8);
        let mut cfg = AugmentConfig::identity();
        assert_eq!(augment(&img, &cfg, &mut stream(1, &[])), img);
        cfg.enabled_ops = vec![AugmentOp::RandomCrop, AugmentOp::Grayscale, AugmentOp::GaussianBlur];
        assert_eq!(augment(&img, &cfg, &mut stream(1, &[])), img);
    }

    #[test]
    fn grayscale_is_identity_on_single_channel() {
        let img = ramp(1, 4, 4);
        let cfg = AugmentConfig {
            grayscale_probability: 1.0,
            enabled_ops: vec![AugmentOp::Grayscale],
            ..AugmentConfig::identity()
        };
        assert_eq!(augment(&img, &cfg, &mut stream(1, &[])), img);
        let rgb = augment(&ramp(3, 4, 4), &cfg, &mut stream(1, &[]));
        assert_eq!(rgb.plane(0), rgb.plane(2));
    }

    #[test]
    fn quarter_area_crop_matches_seeded_oracle() {
        let img = ramp(1, 32, 32);
        let cfg = AugmentConfig {
            crop_scale_range: (0.25, 0.25),
            enabled_ops: vec![AugmentOp::RandomCrop],
            ..AugmentConfig::identity()
        };
        let out = augment(&img, &cfg, &mut stream(9, &[]));
        let mut rng = stream(9, &[]);
        let _area: f64 = rng.random_range(0.25..=0.25);
        let top = rng.random_range(0..=16usize);
        let left = rng.random_range(0..=16usize);
        let oracle = img.crop(top, left, 16, 16).resize_nearest(32, 32);
        assert_eq!(out, oracle);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(3, 6, 6, 0.4).unwrap();
        let out = gaussian_blur(&img, 1.2);
        for v in out.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_views() {
        let img = ramp(3, 8, 8);
        let (a, b) = make_views(&img, GridSpec::new(1).unwrap(), &AugmentConfig::identity(), &mut stream(2, &[])).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn views_are_deterministic() {
        let img = ramp(3, 32, 32);
        let cfg = AugmentConfig::default();
        let g = GridSpec::new(4).unwrap();
        let v1 = make_views(&img, g, &cfg, &mut stream(3, &[1, 2])).unwrap();
        let v2 = make_views(&img, g, &cfg, &mut stream(3, &[1, 2])).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            crop_scale_range: (0.9, 0.5),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            grayscale_probability: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn sorted_pixels(img: &Image) -> Vec<u32> {
        let mut v: Vec<u32> = img.data().iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v
    }

    proptest! {
        #[test]
        fn divisible_shuffle_preserves_pixels(
            g in 1usize..5, bh in 1usize..5, bw in 1usize..5, c in prop::sample::select(vec![1usize, 3]),
            seed in any::<u64>(),
        ) {
            let (h, w) = (g * bh, g * bw);
            let mut rng = stream(seed, &[0]);
            let data: Vec<f32> = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
            let img = Image::new(c, h, w, data).unwrap();
            let out = block_shuffle(&img, GridSpec::new(g).unwrap(), &mut stream(seed, &[1])).unwrap();
            prop_assert_eq!(sorted_pixels(&out), sorted_pixels(&img));
            for ch in 0..c {
                let mut a: Vec<u32> = img.plane(ch).iter().map(|x| x.to_bits()).collect();
                let mut b: Vec<u32> = out.plane(ch).iter().map(|x| x.to_bits()).collect();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }
        }
    }
}
