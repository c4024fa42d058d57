//! Per-failure-type binary image classifiers, likelihood bins, and
//! grayscale saliency explanations.

pub mod bundle;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod saliency;
pub mod synth;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use bundle::{BundleMeta, ModelBundle, BUNDLE_FORMAT_VERSION};
pub use engine::{DiagnosisEngine, DiagnosisEntry, DiagnosisResult};
pub use metrics::{bin, LikelihoodBin, SplitMetrics};
pub use model::Architecture;
pub use preprocess::Preprocess;
pub use saliency::{SaliencyMap, SaliencyTransform};
pub use train::{evaluate, train, TrainConfig};

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("cannot decode image: {0}")]
    UndecodableImage(String),
    #[error("training data for `{failure_type}` has {positives} positives and {negatives} negatives in the train split; both classes are required")]
    SingleClass {
        failure_type: String,
        positives: usize,
        negatives: usize,
    },
    #[error("missing image files: {0:?}")]
    MissingImages(Vec<PathBuf>),
    #[error("split `{0}` has no adjudicated images for this failure type")]
    EmptySplit(String),
    #[error("bundle integrity check failed: {0}")]
    Integrity(String),
    #[error("invalid bundle at {path}: {message}")]
    InvalidBundle { path: PathBuf, message: String },
    #[error("no model bundles deployed")]
    NoBundles,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<candle_core::Error> for DiagnosisError {
    fn from(e: candle_core::Error) -> Self {
        DiagnosisError::Model(e.to_string())
    }
}

pub type Result<T, E = DiagnosisError> = std::result::Result<T, E>;
