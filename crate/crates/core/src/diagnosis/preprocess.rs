use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{DiagnosisError, Result};

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Input pipeline stored with every bundle so training and inference agree:
/// resize the shorter side to `input_size`, center-crop a square, scale to
/// `[0, 1]` and normalize per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub input_size: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Preprocess {
    pub fn new(input_size: u32) -> Self {
        Self {
            input_size,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<DynamicImage> {
        image::load_from_memory(bytes).map_err(|e| DiagnosisError::UndecodableImage(e.to_string()))
    }

    /// Resized and center-cropped RGB image, `input_size` square.
    pub fn crop(&self, img: &DynamicImage) -> RgbImage {
        let s = self.input_size;
        let (w, h) = (img.width().max(1), img.height().max(1));
        let (nw, nh) = if w <= h {
            (s, ((h as u64 * s as u64) / w as u64).max(s as u64) as u32)
        } else {
            (((w as u64 * s as u64) / h as u64).max(s as u64) as u32, s)
        };
        let resized = img.resize_exact(nw, nh, FilterType::Triangle).to_rgb8();
        let x0 = (nw - s) / 2;
        let y0 = (nh - s) / 2;
        image::imageops::crop_imm(&resized, x0, y0, s, s).to_image()
    }

    /// Channel-major normalized values, length `3 * s * s`.
    pub fn to_chw(&self, img: &DynamicImage) -> Vec<f32> {
        let rgb = self.crop(img);
        let s = self.input_size as usize;
        let mut out = vec![0f32; 3 * s * s];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                let v = p[c] as f32 / 255.0;
                out[c * s * s + y as usize * s + x as usize] = (v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn tensor(&self, img: &DynamicImage, device: &Device) -> Result<Tensor> {
        let s = self.input_size as usize;
        Ok(Tensor::from_vec(self.to_chw(img), (1, 3, s, s), device)?)
    }
}

/// Mirrors a channel-major image left-to-right in place.
pub fn flip_horizontal(chw: &mut [f32], size: usize) {
    for row in chw.chunks_mut(size) {
        row.reverse();
    }
}
