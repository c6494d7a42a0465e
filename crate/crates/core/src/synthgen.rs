//! ShapeDomains: a procedural multi-domain image set. The class is the
//! spatial arrangement of three identical dots (global structure, lost under
//! block shuffling); the domain is global appearance (background/foreground
//! levels and channel gains).

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_dataset, GdaDataset, Sample};
use crate::error::{GdaError, Result};
use crate::image::Image;
use crate::rng::stream;

pub const GLYPH_COUNT: usize = 8;
pub const GLYPH_NAMES: [&str; GLYPH_COUNT] = [
    "row", "column", "diagonal", "antidiagonal", "triangle", "inverted", "corner", "arrow",
];

/// Dot-centre spread and dot radius at the reference 32x32 size.
const GLYPH_HALF_32: f64 = 9.0;
const DOT_RADIUS_32: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub background_level: f64,
    pub foreground_level: f64,
    pub channel_gains: [f64; 3],
    pub noise_sigma: f64,
}

impl DomainStyle {
    const fn new(bg: f64, fg: f64, gains: [f64; 3]) -> Self {
        Self {
            background_level: bg,
            foreground_level: fg,
            channel_gains: gains,
            noise_sigma: 0.02,
        }
    }

    /// Expected per-channel image mean when a fraction `coverage` of the
    /// pixels is foreground.
    pub fn expected_means(&self, coverage: f64) -> [f64; 3] {
        let level = self.background_level + (self.foreground_level - self.background_level) * coverage;
        self.channel_gains.map(|g| (level * g).clamp(0.0, 1.0))
    }
}

/// Built-in domains all draw bright glyphs on a darker background; they
/// differ in levels and channel gains only.
pub const BUILTIN_STYLES: [DomainStyle; 6] = [
    DomainStyle::new(0.10, 0.90, [1.0, 0.55, 0.25]),
    DomainStyle::new(0.30, 0.75, [0.35, 0.65, 1.0]),
    DomainStyle::new(0.20, 0.80, [0.3, 1.0, 0.45]),
    DomainStyle::new(0.35, 0.95, [1.0, 0.9, 0.4]),
    DomainStyle::new(0.15, 0.65, [0.8, 0.3, 0.9]),
    DomainStyle::new(0.45, 0.90, [0.5, 0.5, 0.5]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_cell: usize,
    pub image_size: usize,
    /// Explicit styles, one per domain; empty selects the built-in table.
    pub domain_styles: Vec<DomainStyle>,
    /// Maximum glyph offset from the centre, in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_domains: 2,
            samples_per_cell: 100,
            image_size: 32,
            domain_styles: Vec::new(),
            jitter: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn styles(&self) -> Result<Vec<DomainStyle>> {
        if !self.domain_styles.is_empty() {
            if self.domain_styles.len() != self.num_domains {
                return Err(GdaError::invalid(format!(
                    "{} domain styles given for {} domains",
                    self.domain_styles.len(),
                    self.num_domains
                )));
            }
            return Ok(self.domain_styles.clone());
        }
        if self.num_domains > BUILTIN_STYLES.len() {
            return Err(GdaError::invalid(format!(
                "only {} built-in domain styles; supply domain_styles for more",
                BUILTIN_STYLES.len()
            )));
        }
        Ok(BUILTIN_STYLES[..self.num_domains].to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > GLYPH_COUNT {
            return Err(GdaError::invalid(format!(
                "num_classes must be in 1..={GLYPH_COUNT}, got {}",
                self.num_classes
            )));
        }
        if self.num_domains == 0 || self.samples_per_cell == 0 {
            return Err(GdaError::invalid("num_domains and samples_per_cell must be positive"));
        }
        if self.image_size < 16 {
            return Err(GdaError::invalid("image_size must be at least 16"));
        }
        if self.jitter as f64 + (GLYPH_HALF_32 + DOT_RADIUS_32) * self.image_size as f64 / 32.0 > (self.image_size / 2) as f64 {
            return Err(GdaError::invalid("jitter too large for the image size"));
        }
        let styles = self.styles()?;
        let coverage = glyph_mask(0, 32).len() as f64 / (32.0 * 32.0);
        for (i, s) in styles.iter().enumerate() {
            if (s.foreground_level - s.background_level).abs() < 0.3 {
                return Err(GdaError::invalid(format!(
                    "domain {i}: foreground and background levels must differ by at least 0.3"
                )));
            }
            if s.noise_sigma < 0.0 || s.channel_gains.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(GdaError::invalid(format!("domain {i}: gains must lie in [0, 1] and noise must be non-negative")));
            }
            for (j, t) in styles.iter().enumerate().take(i) {
                if s.channel_gains == t.channel_gains {
                    return Err(GdaError::invalid(format!(
                        "domains {j} and {i} share channel gains"
                    )));
                }
                let (a, b) = (s.expected_means(coverage), t.expected_means(coverage));
                let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                if dist < 0.1 {
                    return Err(GdaError::invalid(format!(
                        "domains {j} and {i} have channel means only {dist:.3} apart (need 0.1)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dot centres of glyph `k`, in units of the glyph half-extent.
const DOT_LAYOUTS: [[(f64, f64); 3]; GLYPH_COUNT] = [
    [(-1.0, 0.0), (0.0, 0.0), (1.0, 0.0)],
    [(0.0, -1.0), (0.0, 0.0), (0.0, 1.0)],
    [(-1.0, -1.0), (0.0, 0.0), (1.0, 1.0)],
    [(-1.0, 1.0), (0.0, 0.0), (1.0, -1.0)],
    [(0.0, -1.0), (-1.0, 1.0), (1.0, 1.0)],
    [(0.0, 1.0), (-1.0, -1.0), (1.0, -1.0)],
    [(-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)],
    [(-1.0, 0.0), (1.0, -1.0), (1.0, 1.0)],
];

/// Foreground pixel offsets `(dy, dx)` relative to the glyph centre. Every
/// glyph is three identical dots; only their arrangement differs.
pub fn glyph_mask(k: usize, image_size: usize) -> Vec<(isize, isize)> {
    let scale = image_size as f64 / 32.0;
    let half = (GLYPH_HALF_32 * scale).round();
    let radius = DOT_RADIUS_32 * scale;
    let r = (half + radius).ceil() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (px, py) = (dx as f64 + 0.23, dy as f64 + 0.37);
            let hit = DOT_LAYOUTS[k]
                .iter()
                .any(|&(cx, cy)| (px - cx * half).hypot(py - cy * half) <= radius);
            if hit {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn render(
    glyph: &[(isize, isize)],
    style: &DomainStyle,
    size: usize,
    jitter: usize,
    rng: &mut impl Rng,
) -> Image {
    let j = jitter as i64;
    let cy = ((size / 2) as i64 + rng.random_range(-j..=j)) as isize;
    let cx = ((size / 2) as i64 + rng.random_range(-j..=j)) as isize;
    let mut mask = vec![false; size * size];
    for &(dy, dx) in glyph {
        let (y, x) = (cy + dy, cx + dx);
        if (0..size as isize).contains(&y) && (0..size as isize).contains(&x) {
            mask[y as usize * size + x as usize] = true;
        }
    }
    let noise = Normal::new(0.0, style.noise_sigma.max(1e-12)).expect("valid sigma");
    let mut data = Vec::with_capacity(3 * size * size);
    for gain in style.channel_gains {
        for &fg in &mask {
            let level = if fg {
                style.foreground_level
            } else {
                style.background_level
            };
            let n = if style.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            data.push((level * gain + n) as f32);
        }
    }
    let mut img = Image::new(3, size, size, data).expect("valid shape");
    img.quantize();
    img
}

/// Samples ordered by domain, then class, then index; all labels visible.
pub fn generate(cfg: &SynthConfig) -> Result<GdaDataset> {
    cfg.validate()?;
    let styles = cfg.styles()?;
    let glyphs: Vec<_> = (0..cfg.num_classes).map(|k| glyph_mask(k, cfg.image_size)).collect();
    let mut samples = Vec::with_capacity(cfg.num_domains * cfg.num_classes * cfg.samples_per_cell);
    for (d, style) in styles.iter().enumerate() {
        for (c, glyph) in glyphs.iter().enumerate() {
            for i in 0..cfg.samples_per_cell {
                let mut rng = stream(cfg.seed, &[d as u64, c as u64, i as u64]);
                samples.push(Sample {
                    image: render(glyph, style, cfg.image_size, cfg.jitter, &mut rng),
                    class_label: c as u32,
                    domain_label: d as u32,
                    class_visible: true,
                    domain_visible: true,
                });
            }
        }
    }
    Ok(GdaDataset::new(samples))
}

/// Generate and write images plus `manifest.csv` under `dir`.
pub fn generate_to_dir(cfg: &SynthConfig, dir: &Path) -> Result<(GdaDataset, PathBuf)> {
    let ds = generate(cfg)?;
    let manifest = write_dataset(&ds, dir, "manifest.csv")?;
    Ok((ds, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_share_area_and_differ_in_layout() {
        let areas: Vec<usize> = (0..GLYPH_COUNT).map(|k| glyph_mask(k, 32).len()).collect();
        assert!(areas.iter().all(|&a| a == areas[0]), "{areas:?}");
        assert!(areas[0] > 60, "{areas:?}");
        let distinct: std::collections::BTreeSet<_> = (0..GLYPH_COUNT)
            .map(|k| {
                let mut m = glyph_mask(k, 32);
                m.sort_unstable();
                m
            })
            .collect();
        assert_eq!(distinct.len(), GLYPH_COUNT);
    }

    #[test]
    fn counts_and_determinism() {
        let cfg = SynthConfig {
            samples_per_cell: 5,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a.len(), 4 * 2 * 5);
        assert_eq!(a, generate(&cfg).unwrap());
    }

    fn cell_means(ds: &GdaDataset, pick: impl Fn(&Sample) -> bool) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for s in ds.iter().filter(|s| pick(s)) {
            for (a, m) in acc.iter_mut().zip(s.image.channel_means()) {
                *a += m;
            }
            n += 1.0;
        }
        acc.map(|a| a / n)
    }

    #[test]
    fn domain_signal_is_global_and_class_signal_is_not() {
        let cfg = SynthConfig {
            num_domains: 6,
            num_classes: 8,
            samples_per_cell: 20,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let dom: Vec<[f64; 3]> = (0..6).map(|d| cell_means(&ds, |s| s.domain_label == d)).collect();
        for a in 0..6 {
            for b in a + 1..6 {
                let gap = (0..3).map(|c| (dom[a][c] - dom[b][c]).abs()).fold(0.0, f64::max);
                assert!(gap >= 0.1, "domains {a},{b}: {gap}");
            }
            let cls: Vec<[f64; 3]> = (0..8)
                .map(|k| cell_means(&ds, |s| s.domain_label == a as u32 && s.class_label == k))
                .collect();
            for x in &cls {
                for y in &cls {
                    for c in 0..3 {
                        assert!((x[c] - y[c]).abs() < 0.05, "domain {a}: {x:?} vs {y:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn nearest_centroid_recovers_domains() {
        let ds = generate(&SynthConfig::default()).unwrap();
        let centroids: Vec<[f64; 3]> = (0..2).map(|d| cell_means(&ds, |s| s.domain_label == d)).collect();
        let hits = ds
            .iter()
            .filter(|s| {
                let m = s.image.channel_means();
                let dist = |c: &[f64; 3]| (0..3).map(|i| (m[i] - c[i]).powi(2)).sum::<f64>();
                let best = if dist(&centroids[0]) <= dist(&centroids[1]) { 0 } else { 1 };
                best == s.domain_label
            })
            .count();
        assert!(hits as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn config_checks() {
        let too_many = SynthConfig {
            num_classes: 9,
            ..SynthConfig::default()
        };
        assert!(generate(&too_many).is_err());
        let mut low_contrast = SynthConfig::default();
        low_contrast.domain_styles = vec![DomainStyle::new(0.5, 0.6, [1.0, 1.0, 1.0]), BUILTIN_STYLES[1].clone()];
        assert!(low_contrast.validate().is_err());
        let mut same_gain = SynthConfig::default();
        same_gain.domain_styles = vec![BUILTIN_STYLES[0].clone(), BUILTIN_STYLES[0].clone()];
        assert!(same_gain.validate().is_err());
        for n in 1..=6 {
            let cfg = SynthConfig {
                num_domains: n,
                num_classes: 8,
                ..SynthConfig::default()
            };
            cfg.validate().unwrap();
        }
    }
}
