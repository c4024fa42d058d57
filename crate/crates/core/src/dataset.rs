//! Failure-image dataset: provisional labels inherited from post labels,
//! hash-ordered splits, an append-only expert validation ledger, and the
//! failure-type / visual-feature dictionary.
//!
//! The dataset manifest is line-delimited JSON, one [`LabeledImage`] per line,
//! sorted by `image_id`. The ledger is line-delimited JSON, one
//! [`ValidationRecord`] per line, in arrival order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ImageManifest, Store};
use crate::labeler::PostLabel;

pub const DEFAULT_SPLIT_SALT: &str = "printfix-split-v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("ledger references unknown images: {0:?}")]
    UnknownImages(Vec<String>),
    #[error("dictionary references unknown images: {0:?}")]
    DanglingImages(Vec<String>),
    #[error("dictionary references unknown failure type `{0}`")]
    UnknownFailureType(String),
    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMethod {
    Auto,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub post_id: String,
    pub method: LabelMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image_id: String,
    pub path: PathBuf,
    pub labels: BTreeMap<String, Label>,
    pub split: Split,
    pub provenance: Provenance,
}

impl LabeledImage {
    pub fn label(&self, failure_type: &str) -> Label {
        self.labels.get(failure_type).copied().unwrap_or(Label::Unknown)
    }

    pub fn positives(&self) -> impl Iterator<Item = &str> {
        self.labels
            .iter()
            .filter(|(_, l)| **l == Label::Positive)
            .map(|(t, _)| t.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|x| !(*x >= 0.0)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidRatios(r));
        }
        Ok(())
    }

    /// Largest-remainder allocation of `n` items; counts always sum to `n`.
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let r = [self.train, self.val, self.test];
        let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        // Larger remainder first; earlier split wins ties.
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        [counts[0], counts[1], counts[2]]
    }
}

/// Salted SHA-256 of an image id, used to order images before splitting.
pub fn split_hash(salt: &str, image_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(image_id.as_bytes());
    h.finalize().into()
}

/// Assigns splits by ranking images on their salted hash and cutting the
/// ranking at the configured ratios.
pub fn assign_splits<'a>(
    image_ids: impl IntoIterator<Item = &'a str>,
    ratios: &SplitRatios,
    salt: &str,
) -> Result<BTreeMap<String, Split>> {
    ratios.validate()?;
    let mut ranked: Vec<([u8; 32], &str)> = image_ids
        .into_iter()
        .map(|id| (split_hash(salt, id), id))
        .collect();
    ranked.sort();
    ranked.dedup_by(|a, b| a.1 == b.1);
    let [n_train, n_val, _] = ratios.allocate(ranked.len());
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(i, (_, id))| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), split)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    /// Failure types carried in each image's label map.
    pub failure_types: Vec<String>,
    pub ratios: SplitRatios,
    pub salt: String,
    /// Cap on images drawn into the negative pool (hash order); `None` keeps all.
    pub max_negatives: Option<usize>,
}

impl ForgeConfig {
    pub fn new(failure_types: Vec<String>) -> Self {
        Self {
            failure_types,
            ratios: SplitRatios::default(),
            salt: DEFAULT_SPLIT_SALT.to_string(),
            max_negatives: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeReport {
    /// Images of labeled posts that are absent or unavailable in the image manifest.
    pub missing_images: Vec<String>,
    pub negatives_dropped: usize,
    pub positives_per_type: BTreeMap<String, usize>,
    pub negatives: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub failure_types: Vec<String>,
    /// Sorted by `image_id`.
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn get(&self, image_id: &str) -> Option<&LabeledImage> {
        self.images
            .binary_search_by(|i| i.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.get(image_id).is_some()
    }

    fn sort(&mut self) {
        self.images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }

    /// Line-delimited serialization; a header line carries the failure types.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestHeader {
            failure_types: self.failure_types.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for img in &self.images {
            out.push_str(&serde_json::to_string(img).expect("image serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical manifest serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let parse = |line: usize, e: serde_json::Error| DatasetError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut ds = Dataset::default();
        if let Some((i, first)) = lines.next() {
            let header: ManifestHeader = serde_json::from_str(first).map_err(|e| parse(i + 1, e))?;
            ds.failure_types = header.failure_types;
        }
        for (i, line) in lines {
            let img: LabeledImage = serde_json::from_str(line).map_err(|e| parse(i + 1, e))?;
            ds.images.push(img);
        }
        ds.sort();
        Ok(ds)
    }

    /// Builds provisional labels from post labels and the exported image manifest.
    ///
    /// Images of a post assigned type T are positive for T. Images of posts
    /// with no assigned type form the negative pool and are negative for every
    /// covered type. Other combinations are `unknown`: a warping post's photo
    /// was never judged for stringing.
    pub fn forge(
        labels: &[PostLabel],
        store: &Store,
        images: &ImageManifest,
        config: &ForgeConfig,
    ) -> Result<(Dataset, ForgeReport)> {
        config.ratios.validate()?;
        let covered: BTreeSet<&str> = config.failure_types.iter().map(String::as_str).collect();
        let mut report = ForgeReport::default();
        for t in &covered {
            report.positives_per_type.insert(t.to_string(), 0);
        }
        let mut positives: Vec<LabeledImage> = Vec::new();
        let mut negatives: Vec<LabeledImage> = Vec::new();
        for label in labels {
            let Some(post) = store.get(&label.post_id) else {
                continue;
            };
            let assigned: BTreeSet<&str> = label
                .assigned_types
                .iter()
                .map(String::as_str)
                .filter(|t| covered.contains(t))
                .collect();
            let is_negative = label.assigned_types.is_empty();
            if !is_negative && assigned.is_empty() {
                // Labeled only with types outside the covered set.
                continue;
            }
            for image in &post.image_refs {
                let Some(path) = images.path_of(&image.image_id) else {
                    report.missing_images.push(image.image_id.clone());
                    continue;
                };
                let labels = covered
                    .iter()
                    .map(|t| {
                        let l = if is_negative {
                            Label::Negative
                        } else if assigned.contains(t) {
                            Label::Positive
                        } else {
                            Label::Unknown
                        };
                        (t.to_string(), l)
                    })
                    .collect();
                let img = LabeledImage {
                    image_id: image.image_id.clone(),
                    path: path.to_path_buf(),
                    labels,
                    split: Split::Train,
                    provenance: Provenance {
                        post_id: post.post_id.clone(),
                        method: LabelMethod::Auto,
                    },
                };
                if is_negative {
                    negatives.push(img);
                } else {
                    positives.push(img);
                }
            }
        }
        if let Some(cap) = config.max_negatives {
            if negatives.len() > cap {
                negatives.sort_by_key(|i| split_hash(&config.salt, &i.image_id));
                report.negatives_dropped = negatives.len() - cap;
                negatives.truncate(cap);
            }
        }
        report.negatives = negatives.len();
        let mut images: Vec<LabeledImage> = positives.into_iter().chain(negatives).collect();
        let splits = assign_splits(images.iter().map(|i| i.image_id.as_str()), &config.ratios, &config.salt)?;
        for img in &mut images {
            img.split = splits[&img.image_id];
            for t in img.positives() {
                *report.positives_per_type.get_mut(t).expect("covered type") += 1;
            }
        }
        report.missing_images.sort();
        let mut ds = Dataset {
            failure_types: covered.iter().map(|s| s.to_string()).collect(),
            images,
        };
        ds.sort();
        Ok((ds, report))
    }

    /// Applies the latest ledger record per image. Ties on timestamp go to the
    /// record that arrived later.
    pub fn apply_validation(&self, ledger: &[ValidationRecord]) -> Result<(Dataset, ValidationReport)> {
        let unknown: BTreeSet<String> = ledger
            .iter()
            .filter(|r| !self.contains(&r.image_id))
            .map(|r| r.image_id.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(DatasetError::UnknownImages(unknown.into_iter().collect()));
        }
        let mut latest: HashMap<&str, (usize, &ValidationRecord)> = HashMap::new();
        for (arrival, rec) in ledger.iter().enumerate() {
            let replace = match latest.get(rec.image_id.as_str()) {
                Some((_, prev)) => rec.timestamp >= prev.timestamp,
                None => true,
            };
            if replace {
                latest.insert(&rec.image_id, (arrival, rec));
            }
        }
        let mut report = ValidationReport::default();
        let mut out = Dataset {
            failure_types: self.failure_types.clone(),
            images: Vec::with_capacity(self.images.len()),
        };
        for img in &self.images {
            let Some((_, rec)) = latest.get(img.image_id.as_str()) else {
                out.images.push(img.clone());
                continue;
            };
            match &rec.action {
                ValidationAction::Reject => {
                    report.rejected.push(img.image_id.clone());
                }
                ValidationAction::Accept => {
                    let mut img = img.clone();
                    img.provenance.method = LabelMethod::Expert;
                    report.accepted.push(img.image_id.clone());
                    out.images.push(img);
                }
                ValidationAction::Relabel { types } => {
                    let mut img = img.clone();
                    let chosen: BTreeSet<&str> = types.iter().map(String::as_str).collect();
                    img.labels = self
                        .failure_types
                        .iter()
                        .map(|t| {
                            let l = if chosen.contains(t.as_str()) {
                                Label::Positive
                            } else {
                                Label::Negative
                            };
                            (t.clone(), l)
                        })
                        .collect();
                    img.provenance.method = LabelMethod::Expert;
                    report.relabeled.push(img.image_id.clone());
                    out.images.push(img);
                }
            }
        }
        Ok((out, report))
    }

    /// Images whose labels came from the automatic pass and have no ledger decision.
    pub fn unadjudicated<'a>(&'a self, ledger: &[ValidationRecord]) -> Vec<&'a LabeledImage> {
        let decided: BTreeSet<&str> = ledger.iter().map(|r| r.image_id.as_str()).collect();
        self.images
            .iter()
            .filter(|i| i.provenance.method == LabelMethod::Auto && !decided.contains(i.image_id.as_str()))
            .collect()
    }

    pub fn stats(&self) -> DatasetStats {
        let mut per_type: BTreeMap<String, BTreeMap<Split, LabelCounts>> = BTreeMap::new();
        for t in &self.failure_types {
            let entry = per_type.entry(t.clone()).or_default();
            for s in Split::ALL {
                entry.insert(s, LabelCounts::default());
            }
        }
        for img in &self.images {
            for (t, l) in &img.labels {
                let counts = per_type
                    .entry(t.clone())
                    .or_default()
                    .entry(img.split)
                    .or_default();
                match l {
                    Label::Positive => counts.positive += 1,
                    Label::Negative => counts.negative += 1,
                    Label::Unknown => counts.unknown += 1,
                }
            }
        }
        let mut images_per_split = BTreeMap::new();
        for s in Split::ALL {
            images_per_split.insert(s, 0);
        }
        for img in &self.images {
            *images_per_split.get_mut(&img.split).expect("all splits") += 1;
        }
        DatasetStats {
            per_type,
            images_per_split,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    failure_types: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positive: usize,
    pub negative: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub per_type: BTreeMap<String, BTreeMap<Split, LabelCounts>>,
    pub images_per_split: BTreeMap<Split, usize>,
}

impl DatasetStats {
    pub fn total(&self, failure_type: &str) -> LabelCounts {
        let mut total = LabelCounts::default();
        if let Some(splits) = self.per_type.get(failure_type) {
            for c in splits.values() {
                total.positive += c.positive;
                total.negative += c.negative;
                total.unknown += c.unknown;
            }
        }
        total
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("type\tsplit\tpositive\tnegative\tunknown\n");
        for (t, splits) in &self.per_type {
            for (s, c) in splits {
                out.push_str(&format!("{t}\t{}\t{}\t{}\t{}\n", s.as_str(), c.positive, c.negative, c.unknown));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationAction {
    Accept,
    Reject,
    Relabel { types: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub image_id: String,
    pub reviewer_id: String,
    pub action: ValidationAction,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub relabeled: Vec<String>,
}

pub fn load_ledger(path: &Path) -> Result<Vec<ValidationRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Appends one record; the ledger is never rewritten.
pub fn append_ledger(path: &Path, record: &ValidationRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::to_string(record).expect("record serializes")).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualFeature {
    pub failure_type_id: String,
    pub feature_name: String,
    #[serde(default)]
    pub example_image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureType {
    pub id: String,
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub keyword: Option<String>,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub causes: Vec<String>,
}

/// Curated dictionary input: failure types plus their visual features.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    #[serde(rename = "failure_type", default)]
    pub failure_types: Vec<FailureType>,
    #[serde(rename = "visual_feature", default)]
    pub visual_features: Vec<VisualFeature>,
}

impl FeatureDictionary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("dictionary serializes")
    }

    pub fn features_of<'a>(&'a self, failure_type: &'a str) -> impl Iterator<Item = &'a VisualFeature> + 'a {
        self.visual_features
            .iter()
            .filter(move |f| f.failure_type_id == failure_type)
    }

    /// Structural checks shared by the dataset builder and the knowledge base.
    pub fn check_structure(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let mut ids = BTreeSet::new();
        for t in &self.failure_types {
            if !ids.insert(t.id.as_str()) {
                problems.push(format!("duplicate failure type `{}`", t.id));
            }
            if t.display_name.trim().is_empty() && t.synonyms.iter().all(|s| s.trim().is_empty()) {
                problems.push(format!("failure type `{}` has neither a display name nor synonyms", t.id));
            }
        }
        let mut names = BTreeSet::new();
        for f in &self.visual_features {
            if !ids.contains(f.failure_type_id.as_str()) {
                problems.push(format!(
                    "visual feature `{}` references unknown failure type `{}`",
                    f.feature_name, f.failure_type_id
                ));
            }
            if !names.insert((f.failure_type_id.as_str(), f.feature_name.as_str())) {
                problems.push(format!(
                    "duplicate visual feature `{}` for `{}`",
                    f.feature_name, f.failure_type_id
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Validates curated entries against the dataset: every example image must
/// exist and every failure type needs a feature with at least one example.
pub fn build_feature_dictionary(dataset: &Dataset, curated: FeatureDictionary) -> Result<FeatureDictionary> {
    if let Err(problems) = curated.check_structure() {
        return Err(DatasetError::InvalidDictionary(problems.join("; ")));
    }
    let dangling: BTreeSet<String> = curated
        .visual_features
        .iter()
        .flat_map(|f| f.example_image_ids.iter())
        .filter(|id| !dataset.contains(id))
        .cloned()
        .collect();
    if !dangling.is_empty() {
        return Err(DatasetError::DanglingImages(dangling.into_iter().collect()));
    }
    for t in &curated.failure_types {
        let ok = curated
            .features_of(&t.id)
            .any(|f| !f.example_image_ids.is_empty());
        if !ok {
            return Err(DatasetError::InvalidDictionary(format!(
                "failure type `{}` needs at least one visual feature with an example image",
                t.id
            )));
        }
    }
    let mut out = curated;
    out.failure_types.sort_by(|a, b| a.id.cmp(&b.id));
    out.visual_features.sort_by(|a, b| {
        (a.failure_type_id.as_str(), a.feature_name.as_str()).cmp(&(b.failure_type_id.as_str(), b.feature_name.as_str()))
    });
    Ok(out)
}

/// Per-type positive counts of the original five-type dataset, kept as
/// reference metadata next to locally built datasets.
pub const REFERENCE_POSITIVE_COUNTS: [(&str, usize); 5] = [
    ("stringing", 439),
    ("layer_shifting", 631),
    ("under_extrusion", 283),
    ("warping", 199),
    ("blobs", 226),
];
