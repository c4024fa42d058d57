//! Model bundle artifact.
//!
//! A bundle is a directory:
//!
//! - `bundle.json`: format version, failure type, architecture, preprocessing,
//!   dataset manifest digest, and the SHA-256 of the weights file
//! - `weights.safetensors`
//! - `config.json`: training configuration snapshot
//! - `metrics.json`: per-split accuracy and AUC

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use image::DynamicImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{build_seeded, Architecture, ResidualClassifier};
use super::preprocess::Preprocess;
use super::saliency::{grad_cam, SaliencyMap, SaliencyTransform};
use super::train::TrainConfig;
use super::{DiagnosisError, Result, SplitMetrics};
use crate::dataset::Split;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "bundle.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format_version: u32,
    pub failure_type_id: String,
    pub architecture: Architecture,
    pub preprocess: Preprocess,
    /// Digest of the dataset manifest the weights were trained on.
    pub manifest_digest: Option<String>,
    pub weights_sha256: String,
}

pub struct ModelBundle {
    pub meta: BundleMeta,
    pub config: TrainConfig,
    pub metrics: BTreeMap<Split, SplitMetrics>,
    varmap: VarMap,
    model: ResidualClassifier,
    device: Device,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("meta", &self.meta)
            .field("metrics", &self.metrics)
            .finish_non_exhaustive()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DiagnosisError + '_ {
    move |e| DiagnosisError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn invalid(path: &Path, message: impl Into<String>) -> DiagnosisError {
    DiagnosisError::InvalidBundle {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl ModelBundle {
    pub(crate) fn from_parts(
        failure_type_id: &str,
        config: TrainConfig,
        varmap: VarMap,
        model: ResidualClassifier,
        metrics: BTreeMap<Split, SplitMetrics>,
        manifest_digest: Option<String>,
    ) -> Self {
        Self {
            meta: BundleMeta {
                format_version: BUNDLE_FORMAT_VERSION,
                failure_type_id: failure_type_id.to_string(),
                architecture: config.architecture,
                preprocess: Preprocess::new(config.input_size),
                manifest_digest,
                weights_sha256: String::new(),
            },
            config,
            metrics,
            varmap,
            model,
            device: Device::Cpu,
        }
    }

    /// Freshly initialized (untrained) bundle whose logit is offset by
    /// `head_bias`. Used for fixtures and latency checks.
    pub fn untrained(failure_type_id: &str, config: TrainConfig, head_bias: f32) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let model = build_seeded(config.architecture, &varmap, config.seed, &device)?;
        {
            let data = varmap.data().lock().expect("varmap lock poisoned");
            data["head.bias"].set(&Tensor::new(&[head_bias], &device)?)?;
        }
        Ok(Self::from_parts(failure_type_id, config, varmap, model, BTreeMap::new(), None))
    }

    pub fn failure_type_id(&self) -> &str {
        &self.meta.failure_type_id
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.meta.preprocess
    }

    /// Writes the bundle directory, replacing any previous contents of the
    /// four bundle files.
    pub fn export(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let weights = dir.join(WEIGHTS_FILE);
        self.varmap.save(&weights)?;
        let bytes = fs::read(&weights).map_err(io_err(&weights))?;
        self.meta.weights_sha256 = hex::encode(Sha256::digest(&bytes));
        write_json(dir, CONFIG_FILE, &self.config)?;
        write_json(dir, METRICS_FILE, &self.metrics)?;
        write_json(dir, META_FILE, &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(invalid(dir, "bundle.json not found"));
        }
        let read_json = |name: &str| -> Result<String> {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(io_err(&path))
        };
        let meta: BundleMeta =
            serde_json::from_str(&read_json(META_FILE)?).map_err(|e| invalid(dir, format!("bundle.json: {e}")))?;
        if meta.format_version != BUNDLE_FORMAT_VERSION {
            return Err(invalid(
                dir,
                format!("unsupported format version {} (expected {BUNDLE_FORMAT_VERSION})", meta.format_version),
            ));
        }
        let config: TrainConfig =
            serde_json::from_str(&read_json(CONFIG_FILE)?).map_err(|e| invalid(dir, format!("config.json: {e}")))?;
        let metrics: BTreeMap<Split, SplitMetrics> =
            serde_json::from_str(&read_json(METRICS_FILE)?).map_err(|e| invalid(dir, format!("metrics.json: {e}")))?;
        if config.architecture != meta.architecture {
            return Err(invalid(dir, "architecture in config.json and bundle.json disagree"));
        }
        let weights = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&weights).map_err(io_err(&weights))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != meta.weights_sha256 {
            return Err(DiagnosisError::Integrity(format!(
                "weights digest {digest} does not match recorded {}",
                meta.weights_sha256
            )));
        }
        let device = Device::Cpu;
        let mut varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let model = ResidualClassifier::new(meta.architecture, vb)?;
        varmap
            .load(&weights)
            .map_err(|e| invalid(dir, format!("weights do not match the architecture: {e}")))?;
        Ok(Self {
            meta,
            config,
            metrics,
            varmap,
            model,
            device,
        })
    }

    /// Presence probabilities for preprocessed inputs (`3 * s * s` values each).
    pub fn predict_batch(&self, inputs: &[&[f32]]) -> Result<Vec<f64>> {
        let s = self.meta.preprocess.input_size as usize;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.config.batch_size.max(1)) {
            let flat: Vec<f32> = chunk.iter().flat_map(|x| x.iter().copied()).collect();
            let xs = Tensor::from_vec(flat, (chunk.len(), 3, s, s), &self.device)?;
            let logits = self.model.logits(&xs, false)?.detach().to_vec1::<f32>()?;
            out.extend(logits.into_iter().map(|l| sigmoid(l as f64)));
        }
        Ok(out)
    }

    pub fn predict(&self, img: &DynamicImage) -> Result<f64> {
        let x = self.meta.preprocess.to_chw(img);
        Ok(self.predict_batch(&[&x])?[0])
    }

    /// Probability and grayscale saliency map resampled to `overlay` size.
    pub fn explain(
        &self,
        img: &DynamicImage,
        transform: &SaliencyTransform,
        overlay: (u32, u32),
    ) -> Result<(f64, SaliencyMap)> {
        let x = self.meta.preprocess.tensor(img, &self.device)?;
        let (logit, cam, w, h) = grad_cam(&self.model, &x)?;
        let map = SaliencyMap::from_activation(&cam, w, h, transform).resized(overlay.0, overlay.1);
        Ok((sigmoid(logit), map))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let json = serde_json::to_string_pretty(value).expect("bundle files serialize");
    fs::write(&path, json).map_err(io_err(&path))
}
