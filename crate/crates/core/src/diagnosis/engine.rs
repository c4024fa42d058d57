use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::metrics::{bin, LikelihoodBin};
use super::preprocess::Preprocess;
use super::saliency::{SaliencyMap, SaliencyTransform};
use super::{DiagnosisError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisEntry {
    pub failure_type_id: String,
    pub probability: f64,
    pub bin: LikelihoodBin,
    pub saliency: SaliencyMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub image_id: String,
    /// One entry per deployed bundle, ordered by failure type id.
    pub entries: Vec<DiagnosisEntry>,
}

impl DiagnosisResult {
    pub fn entry(&self, failure_type_id: &str) -> Option<&DiagnosisEntry> {
        self.entries.iter().find(|e| e.failure_type_id == failure_type_id)
    }
}

/// The set of deployed bundles. Immutable after construction; `diagnose`
/// takes `&self` and can run from several threads at once.
#[derive(Debug)]
pub struct DiagnosisEngine {
    bundles: Vec<ModelBundle>,
    transform: SaliencyTransform,
}

impl DiagnosisEngine {
    pub fn new(mut bundles: Vec<ModelBundle>) -> Result<Self> {
        if bundles.is_empty() {
            return Err(DiagnosisError::NoBundles);
        }
        bundles.sort_by(|a, b| a.failure_type_id().cmp(b.failure_type_id()));
        for pair in bundles.windows(2) {
            if pair[0].failure_type_id() == pair[1].failure_type_id() {
                return Err(DiagnosisError::InvalidConfig(format!(
                    "two bundles deployed for `{}`",
                    pair[0].failure_type_id()
                )));
            }
        }
        Ok(Self {
            bundles,
            transform: SaliencyTransform::default(),
        })
    }

    /// Loads every subdirectory of `dir` as a bundle.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| DiagnosisError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut paths = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| DiagnosisError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
            let path = entry.path();
            let hidden = entry.file_name().to_string_lossy().starts_with('.');
            if path.is_dir() && !hidden {
                paths.push(path);
            }
        }
        paths.sort();
        let bundles = paths
            .iter()
            .map(|p| ModelBundle::load(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(bundles)
    }

    pub fn with_transform(mut self, transform: SaliencyTransform) -> Self {
        self.transform = transform;
        self
    }

    pub fn failure_types(&self) -> impl Iterator<Item = &str> {
        self.bundles.iter().map(|b| b.failure_type_id())
    }

    pub fn bundles(&self) -> &[ModelBundle] {
        &self.bundles
    }

    /// Runs every deployed model on the image. Saliency maps are rendered at
    /// `overlay` resolution, or at the image's own size when `None`.
    pub fn diagnose(&self, image_id: &str, bytes: &[u8], overlay: Option<(u32, u32)>) -> Result<DiagnosisResult> {
        let img = Preprocess::decode(bytes)?;
        let overlay = overlay.unwrap_or((img.width(), img.height()));
        let mut entries = Vec::with_capacity(self.bundles.len());
        for bundle in &self.bundles {
            let (probability, saliency) = bundle.explain(&img, &self.transform, overlay)?;
            entries.push(DiagnosisEntry {
                failure_type_id: bundle.failure_type_id().to_string(),
                probability,
                bin: bin(probability)?,
                saliency,
            });
        }
        Ok(DiagnosisResult {
            image_id: image_id.to_string(),
            entries,
        })
    }
}
