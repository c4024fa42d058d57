//! Synthetic two-class image corpus for exercising the training harness:
//! "striped" images (positive) against plain ones (negative).

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiagnosisError, Result};
use crate::dataset::{
    assign_splits, Dataset, Label, LabelMethod, LabeledImage, Provenance, SplitRatios, DEFAULT_SPLIT_SALT,
};

pub const SYNTH_TYPE: &str = "striped";

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub per_class: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class: 200,
            size: 64,
            seed: 7,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [i32; 3] {
    [rng.gen_range(0..256), rng.gen_range(0..256), rng.gen_range(0..256)]
}

fn pixel(base: [i32; 3], noise: i32, rng: &mut ChaCha8Rng) -> Rgb<u8> {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (base[c] + rng.gen_range(-noise..=noise)).clamp(0, 255) as u8;
    }
    Rgb(out)
}

/// Stripes of random period, phase, angle and contrasting colors.
pub fn striped(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let a = random_color(rng);
    let mut b = random_color(rng);
    // Keep the two stripe colors visibly apart.
    while (0..3).map(|c| (a[c] - b[c]).abs()).sum::<i32>() < 180 {
        b = random_color(rng);
    }
    let period = rng.gen_range(6.0..14.0f64);
    let phase = rng.gen_range(0.0..period);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    RgbImage::from_fn(size, size, |x, y| {
        let t = (x as f64 * dx + y as f64 * dy + phase).rem_euclid(period);
        let base = if t < period / 2.0 { a } else { b };
        pixel(base, 12, rng)
    })
}

/// A uniform color with mild noise.
pub fn plain(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let base = random_color(rng);
    RgbImage::from_fn(size, size, |_, _| pixel(base, 12, rng))
}

/// Writes `per_class` images of each class under `dir/images` and returns the
/// manifest, also saved as `dir/dataset.jsonl`.
pub fn generate(dir: &Path, cfg: &SynthConfig) -> Result<Dataset> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| DiagnosisError::Io {
        path: images_dir.clone(),
        source: e,
    })?;
    let images_dir = images_dir.canonicalize().map_err(|e| DiagnosisError::Io {
        path: images_dir.clone(),
        source: e,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for i in 0..cfg.per_class {
        for positive in [true, false] {
            let id = format!("{}_{i:04}", if positive { "striped" } else { "plain" });
            let img = if positive {
                striped(cfg.size, &mut rng)
            } else {
                plain(cfg.size, &mut rng)
            };
            let path = images_dir.join(format!("{id}.png"));
            img.save(&path)
                .map_err(|e| DiagnosisError::Model(format!("writing {}: {e}", path.display())))?;
            entries.push((id, path, positive));
        }
    }
    let splits = assign_splits(entries.iter().map(|(id, _, _)| id.as_str()), &SplitRatios::default(), DEFAULT_SPLIT_SALT)?;
    let mut images: Vec<LabeledImage> = entries
        .into_iter()
        .map(|(id, path, positive)| LabeledImage {
            split: splits[&id],
            labels: [(
                SYNTH_TYPE.to_string(),
                if positive { Label::Positive } else { Label::Negative },
            )]
            .into(),
            provenance: Provenance {
                post_id: id.clone(),
                method: LabelMethod::Expert,
            },
            image_id: id,
            path,
        })
        .collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let dataset = Dataset {
        failure_types: vec![SYNTH_TYPE.to_string()],
        images,
    };
    dataset.save(&dir.join("dataset.jsonl"))?;
    Ok(dataset)
}
