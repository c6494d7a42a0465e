//! Planar (channel-major) floating-point images with values in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{GdaError, Result};
use crate::nn::Tensor;

/// Stack images into an `[N, channels, size, size]` tensor, converting
/// channel counts and resampling as needed.
pub fn to_batch<'a>(images: impl IntoIterator<Item = &'a Image>, channels: usize, size: usize) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        let img = img.with_channels(channels).resize_nearest(size, size);
        data.extend_from_slice(img.data());
        n += 1;
    }
    Tensor::from_vec(&[n, channels, size, size], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    /// `channels x height x width`, row-major within each plane.
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(GdaError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(GdaError::InvalidImage("dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(GdaError::InvalidImage(format!(
                "expected {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Per-channel mean, accumulated in `f64`.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| {
                let p = self.plane(c);
                p.iter().map(|&v| f64::from(v)).sum::<f64>() / p.len() as f64
            })
            .collect()
    }

    /// Nearest-neighbour resampling; source index `floor((dst + 0.5) * src / dst)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let map = |dst: usize, src: usize| -> Vec<usize> {
            (0..dst)
                .map(|i| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1))
                .collect()
        };
        let ys = map(height, self.height);
        let xs = map(width, self.width);
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for &sy in &ys {
                for &sx in &xs {
                    data.push(self.get(c, sy, sx));
                }
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// Sub-rectangle copy. Panics when the rectangle leaves the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// Round every value to the nearest multiple of 1/255, matching an
    /// 8-bit PNG round trip.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Same pixels with `channels` planes: gray is replicated, color is averaged.
    pub fn with_channels(&self, channels: usize) -> Image {
        match (self.channels, channels) {
            (a, b) if a == b => self.clone(),
            (1, 3) => {
                let mut data = Vec::with_capacity(self.data.len() * 3);
                for _ in 0..3 {
                    data.extend_from_slice(&self.data);
                }
                Image::new(3, self.height, self.width, data).expect("valid shape")
            }
            (3, 1) => {
                let n = self.height * self.width;
                let data = (0..n)
                    .map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0)
                    .collect();
                Image::new(1, self.height, self.width, data).expect("valid shape")
            }
            _ => unreachable!("channels are validated to be 1 or 3"),
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let color = img.color();
        if color.has_color() {
            let rgb = img.to_rgb8();
            let mut data = vec![0f32; 3 * h * w];
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
                }
            }
            Image::new(3, h, w, data)
        } else {
            let gray = img.to_luma8();
            let data = gray.pixels().map(|p| f32::from(p[0]) / 255.0).collect();
            Image::new(1, h, w, data)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let img = GrayImage::from_fn(w, h, |x, y| {
                image::Luma([to_u8(self.get(0, y as usize, x as usize))])
            });
            img.save(path)?;
        } else {
            let img = RgbImage::from_fn(w, h, |x, y| {
                let (y, x) = (y as usize, x as usize);
                image::Rgb([
                    to_u8(self.get(0, y, x)),
                    to_u8(self.get(1, y, x)),
                    to_u8(self.get(2, y, x)),
                ])
            });
            img.save(path)?;
        }
        Ok(())
    }
}
