//! Keyword-assisted similarity labeling of community posts.
//!
//! Each post is scored against one archive base document per failure type
//! with tf-idf cosine similarity, then boosted by that type's failure-specific
//! keyword: `combined = cosine + weight * [keyword stem occurs in the query]`.
//! Every type whose combined score reaches the threshold is assigned.
//!
//! Keyword stems are masked out of the similarity vectors so the two evidence
//! channels stay independent; adding a keyword occurrence can then only raise
//! that type's combined score.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Post, Store};

pub const DEFAULT_KEYWORD_WEIGHT: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("at least two base documents are required, got {0}")]
    TooFewDocuments(usize),
    #[error("base document `{0}` has an empty body")]
    EmptyDocument(String),
    #[error("duplicate base document for failure type `{0}`")]
    DuplicateDocument(String),
    #[error("keyword `{keyword}` is used by both `{first}` and `{second}`")]
    DuplicateKeyword {
        keyword: String,
        first: String,
        second: String,
    },
    #[error("keyword rule for `{0}` must have a positive weight")]
    NonPositiveWeight(String),
    #[error("keyword rule references unknown failure type `{0}`")]
    UnknownRuleType(String),
    #[error("keyword `{0}` reduces to an empty stem")]
    EmptyKeyword(String),
    #[error("no base documents or keyword rules loaded")]
    NotConfigured,
    #[error("post `{0}` has no comments and the configuration requires at least one")]
    NoComments(String),
    #[error("store is empty")]
    EmptyStore,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid labeler config {path}: {message}")]
    Config { path: PathBuf, message: String },
}

pub type Result<T, E = LabelError> = std::result::Result<T, E>;

const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves", "im", "ive", "dont", "its", "also", "get", "got", "like",
];

fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.contains(&token)
}

/// Strips one of `ing` or `ed` when at least four characters remain, or a
/// final `s` when at least three remain. Words ending in `ss` keep their
/// final `s`. The longer minimum keeps "string" and "speed" whole.
pub fn stem(token: &str) -> String {
    for (suffix, min_base) in [("ing", 4), ("ed", 4), ("s", 3)] {
        if let Some(base) = token.strip_suffix(suffix) {
            if base.len() < min_base {
                continue;
            }
            if suffix == "s" && base.ends_with('s') {
                continue;
            }
            return base.to_string();
        }
    }
    token.to_string()
}

/// Lowercases, splits on anything that is not an ASCII letter or digit,
/// drops stop-words, and stems.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
        .filter(|t| !is_stop_word(t))
        .map(|t| stem(&t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseDocument {
    pub failure_type_id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub failure_type_id: String,
    /// Stored stemmed and lowercase.
    pub keyword: String,
    pub weight: f64,
}

impl KeywordRule {
    pub fn new(failure_type_id: impl Into<String>, keyword: &str, weight: f64) -> Result<Self> {
        let failure_type_id = failure_type_id.into();
        let stemmed = stem(&keyword.trim().to_ascii_lowercase());
        if stemmed.is_empty() {
            return Err(LabelError::EmptyKeyword(keyword.to_string()));
        }
        if !(weight > 0.0) {
            return Err(LabelError::NonPositiveWeight(failure_type_id));
        }
        Ok(Self {
            failure_type_id,
            keyword: stemmed,
            weight,
        })
    }
}

/// Term index with `idf(t) = ln(N / df(t))` over the base documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TermIndex {
    terms: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl TermIndex {
    pub fn build(documents: &[BaseDocument]) -> Result<Self> {
        if documents.len() < 2 {
            return Err(LabelError::TooFewDocuments(documents.len()));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in documents {
            if doc.body.trim().is_empty() {
                return Err(LabelError::EmptyDocument(doc.failure_type_id.clone()));
            }
            let unique: BTreeSet<String> = tokenize(&document_text(doc)).into_iter().collect();
            for t in unique {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = documents.len() as f64;
        let mut terms = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (term, count)) in df.into_iter().enumerate() {
            terms.insert(term, i);
            idf.push((n / count as f64).ln());
        }
        Ok(Self { terms, idf })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.terms.get(term).copied()
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.index_of(term).map(|i| self.idf[i])
    }

    /// Raw term count times idf; out-of-vocabulary tokens are ignored and
    /// zero weights are not stored.
    pub fn vectorize(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for token in tokenize(text) {
            if let Some(i) = self.index_of(&token) {
                *counts.entry(i).or_insert(0.0) += 1.0;
            }
        }
        SparseVector(
            counts
                .into_iter()
                .map(|(i, tf)| (i, tf * self.idf[i]))
                .filter(|(_, w)| *w > 0.0)
                .collect(),
        )
    }
}

fn document_text(doc: &BaseDocument) -> String {
    format!("{}\n{}", doc.title, doc.body)
}

/// Sparse vector of `(term index, weight)` sorted by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector(pub Vec<(usize, f64)>);

impl SparseVector {
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|(_, w)| *w == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].0.cmp(&other.0[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.0[i].1 * other.0[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn support(&self) -> BTreeSet<usize> {
        self.0.iter().filter(|(_, w)| *w != 0.0).map(|(i, _)| *i).collect()
    }

    fn without(&self, masked: &HashSet<usize>) -> SparseVector {
        SparseVector(self.0.iter().copied().filter(|(i, _)| !masked.contains(i)).collect())
    }
}

/// `dot(u, v) / (|u| |v|)`, defined as 0 when either norm is 0. Clamped to
/// `[0, 1]` against rounding for non-negative inputs.
pub fn cosine(u: &SparseVector, v: &SparseVector) -> f64 {
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (u.dot(v) / (nu * nv)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    pub threshold: f64,
    /// Append comment bodies to the similarity query.
    pub include_comments: bool,
    /// Only posts with at least one comment are classified.
    pub require_comment: bool,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            include_comments: true,
            require_comment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScore {
    pub failure_type_id: String,
    pub cosine: f64,
    pub keyword_hits: u32,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostLabel {
    pub post_id: String,
    /// Ordered by combined score, highest first.
    pub assigned_types: Vec<String>,
    pub scores: Vec<ClassificationScore>,
    pub decision_trace: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub labeled_posts: usize,
    pub unlabeled_posts: usize,
    /// Posts not classified because they have no comments.
    pub skipped_posts: usize,
    pub per_type: BTreeMap<String, usize>,
}

/// Prepared documents, rules, and vocabulary.
#[derive(Debug, Clone)]
pub struct Labeler {
    index: TermIndex,
    type_ids: Vec<String>,
    doc_vectors: Vec<SparseVector>,
    rules: HashMap<String, KeywordRule>,
    masked: HashSet<usize>,
    config: LabelerConfig,
}

impl Labeler {
    pub fn new(
        documents: Vec<BaseDocument>,
        rules: Vec<KeywordRule>,
        config: LabelerConfig,
    ) -> Result<Self> {
        if documents.is_empty() && rules.is_empty() {
            return Err(LabelError::NotConfigured);
        }
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.failure_type_id.clone()) {
                return Err(LabelError::DuplicateDocument(d.failure_type_id.clone()));
            }
        }
        let index = TermIndex::build(&documents)?;
        let mut by_keyword: HashMap<String, String> = HashMap::new();
        let mut rule_map = HashMap::new();
        for rule in rules {
            if !(rule.weight > 0.0) {
                return Err(LabelError::NonPositiveWeight(rule.failure_type_id));
            }
            if !seen.contains(&rule.failure_type_id) {
                return Err(LabelError::UnknownRuleType(rule.failure_type_id));
            }
            if let Some(first) = by_keyword.get(&rule.keyword) {
                return Err(LabelError::DuplicateKeyword {
                    keyword: rule.keyword,
                    first: first.clone(),
                    second: rule.failure_type_id,
                });
            }
            by_keyword.insert(rule.keyword.clone(), rule.failure_type_id.clone());
            if rule_map.contains_key(&rule.failure_type_id) {
                return Err(LabelError::DuplicateDocument(rule.failure_type_id));
            }
            rule_map.insert(rule.failure_type_id.clone(), rule);
        }
        let masked: HashSet<usize> = by_keyword
            .keys()
            .filter_map(|k| index.index_of(k))
            .collect();
        let mut docs = documents;
        docs.sort_by(|a, b| a.failure_type_id.cmp(&b.failure_type_id));
        let doc_vectors = docs
            .iter()
            .map(|d| index.vectorize(&document_text(d)).without(&masked))
            .collect();
        Ok(Self {
            index,
            type_ids: docs.into_iter().map(|d| d.failure_type_id).collect(),
            doc_vectors,
            rules: rule_map,
            masked,
            config,
        })
    }

    pub fn from_config_file(path: &Path) -> Result<Self> {
        let file = LabelerFile::load(path)?;
        file.into_labeler()
    }

    pub fn config(&self) -> &LabelerConfig {
        &self.config
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.config.threshold = threshold;
    }

    pub fn index(&self) -> &TermIndex {
        &self.index
    }

    pub fn failure_types(&self) -> &[String] {
        &self.type_ids
    }

    pub fn query_text(&self, post: &Post) -> String {
        let mut text = format!("{}\n{}", post.title, post.body);
        if self.config.include_comments {
            for c in &post.comments {
                text.push('\n');
                text.push_str(&c.body);
            }
        }
        text
    }

    pub fn classify_post(&self, post: &Post) -> Result<PostLabel> {
        if self.config.require_comment && post.comments.is_empty() {
            return Err(LabelError::NoComments(post.post_id.clone()));
        }
        Ok(self.classify_text(&post.post_id, &self.query_text(post)))
    }

    pub fn classify_text(&self, post_id: &str, text: &str) -> PostLabel {
        let tokens = tokenize(text);
        let mut token_counts: HashMap<&str, u32> = HashMap::new();
        for t in &tokens {
            *token_counts.entry(t.as_str()).or_insert(0) += 1;
        }
        let query = self.index.vectorize(text).without(&self.masked);
        let mut scores: Vec<ClassificationScore> = self
            .type_ids
            .iter()
            .zip(&self.doc_vectors)
            .map(|(id, doc)| {
                let cos = cosine(&query, doc);
                let (hits, boost) = match self.rules.get(id) {
                    Some(rule) => {
                        let hits = token_counts.get(rule.keyword.as_str()).copied().unwrap_or(0);
                        (hits, if hits > 0 { rule.weight } else { 0.0 })
                    }
                    None => (0, 0.0),
                };
                ClassificationScore {
                    failure_type_id: id.clone(),
                    cosine: cos,
                    keyword_hits: hits,
                    combined: cos + boost,
                }
            })
            .collect();
        scores.sort_by(|a, b| {
            b.combined
                .total_cmp(&a.combined)
                .then_with(|| a.failure_type_id.cmp(&b.failure_type_id))
        });
        let assigned_types: Vec<String> = scores
            .iter()
            .filter(|s| s.combined >= self.config.threshold)
            .map(|s| s.failure_type_id.clone())
            .collect();

        let mut trace = String::new();
        let matched: Vec<String> = scores
            .iter()
            .filter(|s| s.keyword_hits > 0)
            .map(|s| format!("{}:{}x{}", s.failure_type_id, self.rules[&s.failure_type_id].keyword, s.keyword_hits))
            .collect();
        let _ = write!(
            trace,
            "keywords=[{}]; threshold={}; top=[",
            matched.join(","),
            self.config.threshold
        );
        let top: Vec<String> = scores
            .iter()
            .take(3)
            .map(|s| format!("{}={:.4}", s.failure_type_id, s.combined))
            .collect();
        let _ = write!(trace, "{}]", top.join(","));

        PostLabel {
            post_id: post_id.to_string(),
            assigned_types,
            scores,
            decision_trace: trace,
        }
    }

    /// Labels every eligible post, ordered by post id.
    pub fn label_corpus(&self, store: &Store) -> Result<(Vec<PostLabel>, LabelSummary)> {
        if store.is_empty() {
            return Err(LabelError::EmptyStore);
        }
        let mut summary = LabelSummary::default();
        for id in &self.type_ids {
            summary.per_type.insert(id.clone(), 0);
        }
        let mut labels = Vec::new();
        for post in store.posts() {
            if self.config.require_comment && post.comments.is_empty() {
                summary.skipped_posts += 1;
                continue;
            }
            let label = self.classify_post(post)?;
            if label.assigned_types.is_empty() {
                summary.unlabeled_posts += 1;
            } else {
                summary.labeled_posts += 1;
                for t in &label.assigned_types {
                    *summary.per_type.entry(t.clone()).or_insert(0) += 1;
                }
            }
            labels.push(label);
        }
        labels.sort_by(|a, b| a.post_id.cmp(&b.post_id));
        Ok((labels, summary))
    }
}

/// Serializes labels as one JSON object per line.
pub fn write_labels(labels: &[PostLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&serde_json::to_string(l).expect("labels serialize"));
        out.push('\n');
    }
    out
}

pub fn read_labels(path: &Path) -> Result<Vec<PostLabel>> {
    let text = fs::read_to_string(path).map_err(|e| LabelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LabelError::Config {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Human-editable labeler configuration (TOML).
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct LabelerFile {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_true")]
    pub include_comments: bool,
    #[serde(default = "default_true")]
    pub require_comment: bool,
    #[serde(rename = "failure_type", default)]
    pub failure_types: Vec<FailureTypeSection>,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct FailureTypeSection {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub keyword: Option<String>,
    #[serde(default)]
    pub weight: Option<f64>,
    #[serde(default)]
    pub document: Option<String>,
    #[serde(default)]
    pub document_path: Option<PathBuf>,
}

impl LabelerFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabelError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut file: LabelerFile = toml::from_str(&text).map_err(|e| LabelError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        file.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(file)
    }

    pub fn documents_and_rules(&self) -> Result<(Vec<BaseDocument>, Vec<KeywordRule>)> {
        let mut documents = Vec::new();
        let mut rules = Vec::new();
        for section in &self.failure_types {
            let body = match (&section.document, &section.document_path) {
                (Some(body), _) => body.clone(),
                (None, Some(p)) => {
                    let path = self.base_dir.join(p);
                    fs::read_to_string(&path).map_err(|e| LabelError::Io { path, source: e })?
                }
                (None, None) => String::new(),
            };
            let title = if section.title.is_empty() {
                section.id.replace('_', " ")
            } else {
                section.title.clone()
            };
            // Synonyms are part of the reference text so alternative names count as evidence.
            let body = if section.synonyms.is_empty() || body.trim().is_empty() {
                body
            } else {
                format!("{body}\n{}", section.synonyms.join(". "))
            };
            documents.push(BaseDocument {
                failure_type_id: section.id.clone(),
                title,
                body,
            });
            if let Some(k) = &section.keyword {
                rules.push(KeywordRule::new(
                    section.id.clone(),
                    k,
                    section.weight.unwrap_or(DEFAULT_KEYWORD_WEIGHT),
                )?);
            }
        }
        Ok((documents, rules))
    }

    pub fn into_labeler(self) -> Result<Labeler> {
        let (documents, rules) = self.documents_and_rules()?;
        Labeler::new(
            documents,
            rules,
            LabelerConfig {
                threshold: self.threshold,
                include_comments: self.include_comments,
                require_comment: self.require_comment,
            },
        )
    }
}
