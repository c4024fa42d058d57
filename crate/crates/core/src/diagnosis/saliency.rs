//! Gradient-weighted class activation maps rendered as grayscale.
//!
//! The raw map is min-max normalized to `a ∈ [0, 1]`, then passed through
//! `g = 1 / (1 + exp(-k (a - c)))` with slope `k = 4` and center `c = 0.5`,
//! so mid attention maps to mid gray and strong attention to near white.

use candle_core::{Tensor, Var, D};
use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::model::ResidualClassifier;
use super::DiagnosisError;

pub const DEFAULT_SLOPE: f64 = 4.0;
pub const DEFAULT_CENTER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTransform {
    pub slope: f64,
    /// Sigmoid midpoint on the normalized scale; `0.0` gives the uncentered variant.
    pub center: f64,
}

impl Default for SaliencyTransform {
    fn default() -> Self {
        Self {
            slope: DEFAULT_SLOPE,
            center: DEFAULT_CENTER,
        }
    }
}

impl SaliencyTransform {
    pub fn gray(&self, normalized_attention: f64) -> f64 {
        1.0 / (1.0 + (-self.slope * (normalized_attention - self.center)).exp())
    }
}

/// Grayscale map with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    /// Normalizes a raw activation grid and applies the sigmoid transform.
    /// A constant grid maps to uniform 0.5.
    pub fn from_activation(raw: &[f32], width: u32, height: u32, transform: &SaliencyTransform) -> Self {
        assert_eq!(raw.len(), (width * height) as usize, "activation grid size");
        let (min, max) = raw
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let values = if !(max > min) {
            vec![0.5; raw.len()]
        } else {
            let range = (max - min) as f64;
            raw.iter()
                .map(|v| transform.gray((*v - min) as f64 / range) as f32)
                .collect()
        };
        Self { width, height, values }
    }

    /// Bilinear resampling to the overlay resolution.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let src: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width, self.height, self.values.clone()).expect("buffer size");
        let out = image::imageops::resize(&src, width, height, image::imageops::FilterType::Triangle);
        Self {
            width,
            height,
            values: out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            let v = self.values[(y * self.width + x) as usize];
            Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_gray_image()
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out.into_inner()
    }
}

/// Logit plus raw class activation map for a single preprocessed image
/// `(1, 3, s, s)`. The map is `ReLU(sum_k alpha_k A_k)` where `alpha_k` is the
/// spatial mean of the logit's gradient with respect to channel `k` of the
/// last convolutional block.
pub fn grad_cam(model: &ResidualClassifier, input: &Tensor) -> Result<(f64, Vec<f32>, u32, u32), DiagnosisError> {
    let features = model.features(input, false)?.detach();
    let (_, channels, h, w) = features.dims4()?;
    let features = Var::from_tensor(&features)?;
    let logit = model.head(features.as_tensor())?;
    let grads = logit.sum_all()?.backward()?;
    let d_features = grads
        .get(features.as_tensor())
        .ok_or_else(|| DiagnosisError::Model("no gradient reached the feature map".into()))?;
    let alpha = d_features.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let cam = features
        .as_tensor()
        .broadcast_mul(&alpha)?
        .sum(1)?
        .relu()?
        .reshape((h * w,))?
        .to_vec1::<f32>()?;
    let logit = logit.to_vec1::<f32>()?[0] as f64;
    debug_assert!(channels > 0);
    Ok((logit, cam, w as u32, h as u32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_reference_points() {
        let t = SaliencyTransform::default();
        assert_eq!(t.gray(0.5), 0.5);
        // 1 / (1 + e^-2) and 1 / (1 + e^2)
        assert!((t.gray(1.0) - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((t.gray(0.0) - 0.119_202_922_022_117_6).abs() < 1e-12);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        let m = SaliencyMap::from_activation(&[3.0; 6], 3, 2, &SaliencyTransform::default());
        assert!(m.values.iter().all(|v| *v == 0.5));
        let m = SaliencyMap::from_activation(&[0.0; 4], 2, 2, &SaliencyTransform::default());
        assert!(m.values.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn normalized_extremes() {
        let m = SaliencyMap::from_activation(&[0.0, 2.0, 1.0, 4.0], 2, 2, &SaliencyTransform::default());
        assert!((m.values[0] as f64 - 0.119_202_922).abs() < 1e-6);
        assert!((m.values[1] as f64 - 0.5).abs() < 1e-6);
        assert!((m.values[3] as f64 - 0.880_797_078).abs() < 1e-6);
    }

    #[test]
    fn resize_stays_in_range() {
        let m = SaliencyMap::from_activation(&[0.0, 1.0, 2.0, 3.0], 2, 2, &SaliencyTransform::default());
        let big = m.resized(64, 48);
        assert_eq!(big.values.len(), 64 * 48);
        assert!(big.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(big.to_gray_image().dimensions(), (64, 48));
    }

    proptest! {
        #[test]
        fn symmetric_and_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let t = SaliencyTransform::default();
            prop_assert!((t.gray(a) + t.gray(1.0 - a) - 1.0).abs() < 1e-12);
            if a < b {
                prop_assert!(t.gray(a) < t.gray(b));
            }
        }

        #[test]
        fn nonconstant_maps_stay_open_interval(raw in prop::collection::vec(-5.0f32..5.0, 4..64)) {
            let n = raw.len() as u32;
            let m = SaliencyMap::from_activation(&raw, n, 1, &SaliencyTransform::default());
            prop_assert!(m.values.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}
