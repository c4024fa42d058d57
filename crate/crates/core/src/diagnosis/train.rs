//! Training and evaluation harness for one binary model per failure type.
//!
//! Defaults follow the reference recipe: 18-layer residual network with every
//! layer trained, Adam, learning rate 1e-4, at most 20 epochs, batch 32.
//! Images whose label for the target type is `unknown` are excluded.
//!
//! Runs are reproducible for a fixed seed on the same machine; matrix kernels
//! may reorder floating-point reductions across CPUs, so bit-identical weights
//! across hardware are not guaranteed.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::metrics::SplitMetrics;
use super::model::{build_seeded, Architecture};
use super::preprocess::{flip_horizontal, Preprocess};
use super::{DiagnosisError, Result};
use crate::dataset::{Dataset, Label, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// Backbone weights (safetensors, torchvision parameter names) used as the
    /// starting point; every layer is still trained.
    pub pretrained_weights: Option<PathBuf>,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub input_size: u32,
    pub seed: u64,
    pub horizontal_flip: bool,
    /// Stop after this many epochs without a better validation accuracy and
    /// keep the best epoch's weights. `None` trains for `max_epochs`.
    pub early_stopping_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet18,
            pretrained_weights: None,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            max_epochs: 20,
            batch_size: 32,
            input_size: 224,
            seed: 0,
            horizontal_flip: true,
            early_stopping_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(DiagnosisError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.max_epochs < 1 {
            return Err(DiagnosisError::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(DiagnosisError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.input_size < 32 {
            return Err(DiagnosisError::InvalidConfig("input_size must be at least 32 pixels".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| DiagnosisError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Adjudicated examples of one split: preprocessed input plus binary target.
struct Examples {
    inputs: Vec<Vec<f32>>,
    targets: Vec<f32>,
}

impl Examples {
    fn scores_by_class(&self, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (s, t) in scores.iter().zip(&self.targets) {
            if *t > 0.5 {
                pos.push(*s);
            } else {
                neg.push(*s);
            }
        }
        (pos, neg)
    }
}

fn adjudicated<'a>(dataset: &'a Dataset, failure_type: &'a str, split: Split) -> impl Iterator<Item = (&'a crate::dataset::LabeledImage, bool)> + 'a {
    dataset.images.iter().filter(move |i| i.split == split).filter_map(move |i| match i.label(failure_type) {
        Label::Positive => Some((i, true)),
        Label::Negative => Some((i, false)),
        Label::Unknown => None,
    })
}

fn load_split(dataset: &Dataset, failure_type: &str, split: Split, preprocess: &Preprocess) -> Result<Examples> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (img, positive) in adjudicated(dataset, failure_type, split) {
        let bytes = std::fs::read(&img.path).map_err(|e| DiagnosisError::Io {
            path: img.path.clone(),
            source: e,
        })?;
        let decoded = Preprocess::decode(&bytes)?;
        inputs.push(preprocess.to_chw(&decoded));
        targets.push(if positive { 1.0 } else { 0.0 });
    }
    Ok(Examples { inputs, targets })
}

fn snapshot(varmap: &VarMap) -> Result<Vec<(Var, Tensor)>> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    data.values()
        .map(|v| Ok((v.clone(), v.as_tensor().copy()?)))
        .collect()
}

fn restore(saved: &[(Var, Tensor)]) -> Result<()> {
    for (var, value) in saved {
        var.set(value)?;
    }
    Ok(())
}

fn load_pretrained(varmap: &VarMap, path: &std::path::Path, device: &Device) -> Result<usize> {
    let tensors = candle_core::safetensors::load(path, device)?;
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut loaded = 0;
    for (name, var) in data.iter() {
        if name.starts_with("head.") {
            continue;
        }
        if let Some(t) = tensors.get(name) {
            if t.shape() != var.shape() {
                return Err(DiagnosisError::InvalidConfig(format!(
                    "pretrained tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
            loaded += 1;
        }
    }
    if loaded == 0 {
        return Err(DiagnosisError::InvalidConfig(format!(
            "no backbone tensors matched in {}",
            path.display()
        )));
    }
    Ok(loaded)
}

/// Trains a binary classifier for `failure_type` on the dataset's train split
/// and reports accuracy/AUC on every split that has adjudicated images.
pub fn train(dataset: &Dataset, failure_type: &str, config: &TrainConfig) -> Result<ModelBundle> {
    config.validate()?;
    let (mut positives, mut negatives) = (0, 0);
    let mut missing = Vec::new();
    for split in Split::ALL {
        for (img, positive) in adjudicated(dataset, failure_type, split) {
            if split == Split::Train {
                if positive {
                    positives += 1;
                } else {
                    negatives += 1;
                }
            }
            if !img.path.exists() {
                missing.push(img.path.clone());
            }
        }
    }
    if positives == 0 || negatives == 0 {
        return Err(DiagnosisError::SingleClass {
            failure_type: failure_type.to_string(),
            positives,
            negatives,
        });
    }
    if !missing.is_empty() {
        return Err(DiagnosisError::MissingImages(missing));
    }

    let device = Device::Cpu;
    let preprocess = Preprocess::new(config.input_size);
    let train_set = load_split(dataset, failure_type, Split::Train, &preprocess)?;
    let val_set = load_split(dataset, failure_type, Split::Val, &preprocess)?;

    let varmap = VarMap::new();
    let model = build_seeded(config.architecture, &varmap, config.seed, &device)?;
    if let Some(path) = &config.pretrained_weights {
        let n = load_pretrained(&varmap, path, &device)?;
        info!("initialized {n} backbone tensors from {}", path.display());
    }
    let params = ParamsAdamW {
        lr: config.learning_rate,
        weight_decay: 0.0,
        ..ParamsAdamW::default()
    };
    let mut optimizer = AdamW::new(varmap.all_vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let s = config.input_size as usize;

    let mut best: Option<(f64, usize, Vec<(Var, Tensor)>)> = None;
    let mut order: Vec<usize> = (0..train_set.inputs.len()).collect();
    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut seen, mut correct, mut loss_sum) = (0usize, 0usize, 0f64);
        for batch in order.chunks(config.batch_size) {
            // Batch statistics are undefined for a single example.
            if batch.len() < 2 {
                continue;
            }
            let mut flat = Vec::with_capacity(batch.len() * 3 * s * s);
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut x = train_set.inputs[i].clone();
                if config.horizontal_flip && rng.gen_bool(0.5) {
                    flip_horizontal(&mut x, s);
                }
                flat.extend_from_slice(&x);
                targets.push(train_set.targets[i]);
            }
            let xs = Tensor::from_vec(flat, (batch.len(), 3, s, s), &device)?;
            let ys = Tensor::from_vec(targets.clone(), batch.len(), &device)?;
            let logits = model.logits(&xs, true)?;
            let loss = bce_with_logits(&logits, &ys)?;
            optimizer.backward_step(&loss)?;
            let logits = logits.detach().to_vec1::<f32>()?;
            correct += logits
                .iter()
                .zip(&targets)
                .filter(|(l, t)| (**l >= 0.0) == (**t > 0.5))
                .count();
            seen += batch.len();
            loss_sum += loss.to_scalar::<f32>()? as f64 * batch.len() as f64;
        }
        let train_acc = 100.0 * correct as f64 / seen.max(1) as f64;
        let mut line = format!(
            "epoch {}/{}: loss {:.4}, running train acc {:.2}",
            epoch + 1,
            config.max_epochs,
            loss_sum / seen.max(1) as f64,
            train_acc
        );
        if let Some(patience) = config.early_stopping_patience {
            if !val_set.inputs.is_empty() {
                let refs: Vec<&[f32]> = val_set.inputs.iter().map(Vec::as_slice).collect();
                let scores = predict_raw(&model, &refs, s, config.batch_size, &device)?;
                let (pos, neg) = val_set.scores_by_class(&scores);
                let val_acc = super::metrics::accuracy(&pos, &neg).unwrap_or(0.0);
                line.push_str(&format!(", val acc {val_acc:.2}"));
                let improved = best.as_ref().is_none_or(|(b, _, _)| val_acc > *b);
                if improved {
                    best = Some((val_acc, epoch, snapshot(&varmap)?));
                }
                info!("{line} ({:.1?})", started.elapsed());
                let (_, best_epoch, _) = best.as_ref().expect("set above");
                if epoch - best_epoch >= patience {
                    info!("early stop after epoch {}", epoch + 1);
                    break;
                }
                continue;
            }
        }
        info!("{line} ({:.1?})", started.elapsed());
    }
    if let Some((_, epoch, saved)) = &best {
        info!("restoring weights from epoch {}", epoch + 1);
        restore(saved)?;
    }

    let mut bundle = ModelBundle::from_parts(
        failure_type,
        config.clone(),
        varmap,
        model,
        BTreeMap::new(),
        Some(dataset.digest()),
    );
    let mut metrics = BTreeMap::new();
    for split in Split::ALL {
        let examples = match split {
            Split::Train => &train_set,
            Split::Val => &val_set,
            Split::Test => &load_split(dataset, failure_type, Split::Test, &preprocess)?,
        };
        if let Some(m) = split_metrics(&bundle, examples)? {
            metrics.insert(split, m);
        }
    }
    bundle.metrics = metrics;
    Ok(bundle)
}

/// Mean binary cross-entropy on logits in the overflow-free form
/// `max(x, 0) - x * y + ln(1 + exp(-|x|))`.
fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let loss = ((logits.relu()? - (logits * targets)?)? + softplus)?;
    Ok(loss.mean_all()?)
}

fn predict_raw(
    model: &super::model::ResidualClassifier,
    inputs: &[&[f32]],
    s: usize,
    batch_size: usize,
    device: &Device,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let flat: Vec<f32> = chunk.iter().flat_map(|x| x.iter().copied()).collect();
        let xs = Tensor::from_vec(flat, (chunk.len(), 3, s, s), device)?;
        let logits = model.logits(&xs, false)?.detach().to_vec1::<f32>()?;
        out.extend(logits.into_iter().map(|l| super::bundle::sigmoid(l as f64)));
    }
    Ok(out)
}

fn split_metrics(bundle: &ModelBundle, examples: &Examples) -> Result<Option<SplitMetrics>> {
    if examples.inputs.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&[f32]> = examples.inputs.iter().map(Vec::as_slice).collect();
    let scores = bundle.predict_batch(&refs)?;
    let (pos, neg) = examples.scores_by_class(&scores);
    Ok(SplitMetrics::from_scores(&pos, &neg))
}

/// Accuracy (threshold 0.5) and AUC of a bundle on one split of a dataset.
pub fn evaluate(bundle: &ModelBundle, dataset: &Dataset, split: Split) -> Result<SplitMetrics> {
    let preprocess = *bundle.preprocess();
    let examples = load_split(dataset, bundle.failure_type_id(), split, &preprocess)?;
    split_metrics(bundle, &examples)?.ok_or_else(|| DiagnosisError::EmptySplit(split.as_str().to_string()))
}

/// Per-image scores for a split, in dataset order; used by reporting tools.
pub fn score_split(bundle: &ModelBundle, dataset: &Dataset, split: Split) -> Result<Vec<(String, bool, f64)>> {
    let preprocess = *bundle.preprocess();
    let ids: Vec<(String, bool)> = adjudicated(dataset, bundle.failure_type_id(), split)
        .map(|(i, p)| (i.image_id.clone(), p))
        .collect();
    let examples = load_split(dataset, bundle.failure_type_id(), split, &preprocess)?;
    let refs: Vec<&[f32]> = examples.inputs.iter().map(Vec::as_slice).collect();
    let scores = bundle.predict_batch(&refs)?;
    Ok(ids.into_iter().zip(scores).map(|((id, p), s)| (id, p, s)).collect())
}
