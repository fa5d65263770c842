use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::ops::device;
use crate::{Error, Result};

/// A CHW image with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Record(format!(
                "image data of length {} for shape {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            shape: [channels, height, width],
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            shape: [channels, height, width],
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height() + y) * self.width() + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            self.shape.to_vec(),
            &device(),
        )?)
    }

    /// Crops a random window whose sides are at least `min_scale` of the
    /// original and resizes it back with nearest-neighbour sampling.
    pub fn random_crop<R: rand::Rng + ?Sized>(&self, min_scale: f64, rng: &mut R) -> Self {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let side = |n: usize, rng: &mut R| {
            let lo = ((n as f64 * min_scale).ceil() as usize).clamp(1, n);
            rng.random_range(lo..=n)
        };
        let (ch, cw) = (side(h, rng), side(w, rng));
        let (y0, x0) = (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw));
        let mut out = Self::zeros(c, h, w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ci, y, x, self.get(ci, y0 + y * ch / h, x0 + x * cw / w));
                }
            }
        }
        out
    }

    /// Little-endian bytes of every value, used for content hashing.
    pub fn bytes(&self) -> Vec<u8> {
        self.shape
            .iter()
            .flat_map(|d| (*d as u64).to_le_bytes())
            .chain(self.data.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Loads an 8-bit RGB PNG (other formats are converted to RGB).
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, f64::from(px[c]) / 255.0);
            }
        }
        Ok(out)
    }

    /// Saves as an 8-bit RGB PNG; values are rounded to the nearest level.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.channels() != 3 {
            return Err(Error::Record("only 3-channel images can be saved".into()));
        }
        let (h, w) = (self.height(), self.width());
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px =
                |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save(path)?;
        Ok(())
    }
}
