//! Solution knowledge base: ranked community suggestions, solution cards with
//! clues and difficulty levels, failure descriptions, and the glossary.
//!
//! A knowledge base is a directory of TOML files:
//!
//! - `failure_types.toml`: `[[failure_type]]` and `[[visual_feature]]` tables
//! - `cards.toml`: `[[card]]`
//! - `clues.toml`: `[[clue]]`
//! - `glossary.toml`: `[[term]]`
//!
//! Loading checks every link and uniqueness rule and either returns a complete
//! handle or the full list of violations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Store;
use crate::dataset::{FailureType, FeatureDictionary, VisualFeature};
use crate::labeler::PostLabel;

pub const FAILURE_TYPES_FILE: &str = "failure_types.toml";
pub const CARDS_FILE: &str = "cards.toml";
pub const CLUES_FILE: &str = "clues.toml";
pub const GLOSSARY_FILE: &str = "glossary.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub file: String,
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.file, self.subject, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CuratorError {
    #[error("knowledge base rejected with {} violation(s):\n{}", .0.len(), .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Violations(Vec<Violation>),
    #[error("unknown failure type `{0}`")]
    UnknownFailureType(String),
    #[error("unknown clue `{clue_id}` for failure type `{failure_type_id}`")]
    UnknownClue { failure_type_id: String, clue_id: String },
    #[error("labels reference post `{0}` which is not in the store")]
    LabelsOutsideStore(String),
    #[error("comment `{comment_id}` is already {status:?}")]
    StatusTransition { comment_id: String, status: ExtractionStatus },
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = CuratorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolutionKind {
    Common,
    Specific,
}

impl SolutionKind {
    pub const ALL: [SolutionKind; 2] = [SolutionKind::Common, SolutionKind::Specific];

    pub fn as_str(self) -> &'static str {
        match self {
            SolutionKind::Common => "common",
            SolutionKind::Specific => "specific",
        }
    }
}

impl std::str::FromStr for SolutionKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SolutionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown kind `{s}`; expected one of: common, specific"))
    }
}

/// Ordered from easiest to hardest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Basic,
    Intermediate,
    Advanced,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Basic, Difficulty::Intermediate, Difficulty::Advanced];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Basic => "Basic",
            Difficulty::Intermediate => "Intermediate",
            Difficulty::Advanced => "Advanced",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown difficulty `{s}`; expected one of: Basic, Intermediate, Advanced"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultySort {
    DifficultyAsc,
    DifficultyDesc,
}

impl std::str::FromStr for DifficultySort {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "difficulty_asc" => Ok(DifficultySort::DifficultyAsc),
            "difficulty_desc" => Ok(DifficultySort::DifficultyDesc),
            _ => Err(format!("unknown sort `{s}`; expected one of: difficulty_asc, difficulty_desc")),
        }
    }
}

/// Where a card's suggestion came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum CardProvenance {
    Archive { document_id: String },
    Comment { comment_id: String, upvotes: u32 },
    /// Written by knowledge-base maintainers in place of a mined comment.
    Editorial { note: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionCard {
    pub card_id: String,
    pub failure_type_id: String,
    pub title: String,
    #[serde(default)]
    pub summary: String,
    pub kind: SolutionKind,
    pub difficulty: Difficulty,
    /// Filled from both directions of the clue links at load.
    #[serde(default)]
    pub clue_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail_link: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_link: Option<String>,
    pub provenance: CardProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clue {
    pub clue_id: String,
    pub failure_type_id: String,
    pub text: String,
    #[serde(default)]
    pub card_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossaryEntry {
    pub term: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub short_definition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example_image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_link: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionStatus {
    Pending,
    Extracted,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedComment {
    pub comment_id: String,
    pub post_id: String,
    pub failure_type_id: String,
    pub upvotes: u32,
    pub created_at: DateTime<Utc>,
    pub body: String,
    pub extraction_status: ExtractionStatus,
}

impl RankedComment {
    /// Records the curator's decision; only pending comments can move.
    pub fn mark(&mut self, status: ExtractionStatus) -> Result<()> {
        if self.extraction_status != ExtractionStatus::Pending || status == ExtractionStatus::Pending {
            return Err(CuratorError::StatusTransition {
                comment_id: self.comment_id.clone(),
                status: self.extraction_status,
            });
        }
        self.extraction_status = status;
        Ok(())
    }
}

/// All comments on posts labeled with `failure_type_id`, most upvoted first;
/// ties go to the earlier comment, then the smaller id.
pub fn rank_comments(labels: &[PostLabel], store: &Store, failure_type_id: &str) -> Result<Vec<RankedComment>> {
    let known = labels
        .iter()
        .flat_map(|l| l.scores.iter().map(|s| s.failure_type_id.as_str()).chain(l.assigned_types.iter().map(String::as_str)))
        .any(|t| t == failure_type_id);
    if !known {
        return Err(CuratorError::UnknownFailureType(failure_type_id.to_string()));
    }
    let mut out = Vec::new();
    for label in labels {
        let post = store
            .get(&label.post_id)
            .ok_or_else(|| CuratorError::LabelsOutsideStore(label.post_id.clone()))?;
        if !label.assigned_types.iter().any(|t| t == failure_type_id) {
            continue;
        }
        out.extend(post.comments.iter().map(|c| RankedComment {
            comment_id: c.comment_id.clone(),
            post_id: post.post_id.clone(),
            failure_type_id: failure_type_id.to_string(),
            upvotes: c.upvotes,
            created_at: c.created_at,
            body: c.body.clone(),
            extraction_status: ExtractionStatus::Pending,
        }));
    }
    out.sort_by(|a, b| {
        b.upvotes
            .cmp(&a.upvotes)
            .then(a.created_at.cmp(&b.created_at))
            .then_with(|| a.comment_id.cmp(&b.comment_id))
    });
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionQuery {
    /// `None` returns both kinds.
    pub kind: Option<SolutionKind>,
    /// Cards tagged with any of these clues; empty means no clue filter.
    pub clue_ids: Vec<String>,
    /// Empty means every difficulty.
    pub difficulties: Vec<Difficulty>,
    /// `None` keeps knowledge-base order.
    pub sort: Option<DifficultySort>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureDescription {
    pub failure_type: FailureType,
    pub visual_features: Vec<VisualFeature>,
    pub example_image_ids: Vec<String>,
    pub clues: Vec<Clue>,
}

#[derive(Deserialize)]
struct CardsFile {
    #[serde(default)]
    card: Vec<SolutionCard>,
}

#[derive(Deserialize)]
struct CluesFile {
    #[serde(default)]
    clue: Vec<Clue>,
}

#[derive(Deserialize)]
struct GlossaryFile {
    #[serde(default)]
    term: Vec<GlossaryEntry>,
}

/// Case-insensitive form used for glossary matching; hyphens, underscores and
/// runs of whitespace compare equal.
pub fn normalize_term(term: &str) -> String {
    term.split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|p| !p.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_url(s: &str) -> bool {
    (s.starts_with("https://") || s.starts_with("http://")) && s.len() > "https://".len()
}

/// Immutable, fully validated knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    dictionary: FeatureDictionary,
    cards: Vec<SolutionCard>,
    clues: Vec<Clue>,
    glossary: Vec<GlossaryEntry>,
    terms: BTreeMap<String, usize>,
}

impl KnowledgeBase {
    /// Loads and validates a knowledge base directory. Missing `cards`,
    /// `clues` or `glossary` files count as empty; the failure-type file is
    /// required.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut violations = Vec::new();
        let read = |name: &str, required: bool, violations: &mut Vec<Violation>| -> Option<String> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(text) => Some(text),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound && !required => Some(String::new()),
                Err(e) => {
                    violations.push(Violation {
                        file: name.to_string(),
                        subject: "file".into(),
                        message: e.to_string(),
                    });
                    None
                }
            }
        };
        fn parse<T: serde::de::DeserializeOwned>(name: &str, text: Option<String>, violations: &mut Vec<Violation>) -> Option<T> {
            match toml::from_str(&text?) {
                Ok(v) => Some(v),
                Err(e) => {
                    violations.push(Violation {
                        file: name.to_string(),
                        subject: "syntax".into(),
                        message: e.to_string().trim().replace('\n', " "),
                    });
                    None
                }
            }
        }
        let dict_text = read(FAILURE_TYPES_FILE, true, &mut violations);
        let cards_text = read(CARDS_FILE, false, &mut violations);
        let clues_text = read(CLUES_FILE, false, &mut violations);
        let glossary_text = read(GLOSSARY_FILE, false, &mut violations);
        let dictionary: Option<FeatureDictionary> = parse(FAILURE_TYPES_FILE, dict_text, &mut violations);
        let cards: Option<CardsFile> = parse(CARDS_FILE, cards_text, &mut violations);
        let clues: Option<CluesFile> = parse(CLUES_FILE, clues_text, &mut violations);
        let glossary: Option<GlossaryFile> = parse(GLOSSARY_FILE, glossary_text, &mut violations);
        match (dictionary, cards, clues, glossary) {
            (Some(d), Some(c), Some(cl), Some(g)) => Self::from_parts(d, c.card, cl.clue, g.term),
            _ => Err(CuratorError::Violations(violations)),
        }
    }

    pub fn from_parts(
        dictionary: FeatureDictionary,
        mut cards: Vec<SolutionCard>,
        mut clues: Vec<Clue>,
        glossary: Vec<GlossaryEntry>,
    ) -> Result<Self> {
        let mut v = Vec::new();
        let mut push = |file: &str, subject: String, message: String| {
            v.push(Violation {
                file: file.to_string(),
                subject,
                message,
            })
        };

        if let Err(problems) = dictionary.check_structure() {
            for p in problems {
                push(FAILURE_TYPES_FILE, "dictionary".into(), p);
            }
        }
        let types: BTreeSet<&str> = dictionary.failure_types.iter().map(|t| t.id.as_str()).collect();

        let mut card_types: BTreeMap<String, String> = BTreeMap::new();
        for card in &cards {
            let subject = format!("card `{}`", card.card_id);
            if card.card_id.trim().is_empty() {
                push(CARDS_FILE, subject.clone(), "empty card_id".into());
            }
            if card_types.insert(card.card_id.clone(), card.failure_type_id.clone()).is_some() {
                push(CARDS_FILE, subject.clone(), "duplicate card_id".into());
            }
            if !types.contains(card.failure_type_id.as_str()) {
                push(CARDS_FILE, subject.clone(), format!("unknown failure type `{}`", card.failure_type_id));
            }
            if card.title.trim().is_empty() {
                push(CARDS_FILE, subject.clone(), "empty title".into());
            }
            let has_link = card.detail_link.as_deref().is_some_and(|l| !l.trim().is_empty());
            if card.summary.trim().is_empty() && !has_link {
                push(CARDS_FILE, subject.clone(), "needs a summary or a detail_link".into());
            }
            for (field, link) in [("detail_link", &card.detail_link), ("video_link", &card.video_link)] {
                if let Some(l) = link {
                    if !is_url(l) {
                        push(CARDS_FILE, subject.clone(), format!("{field} `{l}` is not an http(s) URL"));
                    }
                }
            }
            match (&card.kind, &card.provenance) {
                (SolutionKind::Common, CardProvenance::Comment { .. } | CardProvenance::Editorial { .. }) => push(
                    CARDS_FILE,
                    subject.clone(),
                    "common cards must come from an archive document".into(),
                ),
                (SolutionKind::Specific, CardProvenance::Archive { .. }) => push(
                    CARDS_FILE,
                    subject.clone(),
                    "specific cards cannot cite an archive document".into(),
                ),
                _ => {}
            }
        }

        let mut clue_types: BTreeMap<String, String> = BTreeMap::new();
        for clue in &clues {
            let subject = format!("clue `{}`", clue.clue_id);
            if clue.clue_id.trim().is_empty() {
                push(CLUES_FILE, subject.clone(), "empty clue_id".into());
            }
            if clue_types.insert(clue.clue_id.clone(), clue.failure_type_id.clone()).is_some() {
                push(CLUES_FILE, subject.clone(), "duplicate clue_id".into());
            }
            if !types.contains(clue.failure_type_id.as_str()) {
                push(CLUES_FILE, subject.clone(), format!("unknown failure type `{}`", clue.failure_type_id));
            }
            if clue.text.trim().is_empty() {
                push(CLUES_FILE, subject.clone(), "empty text".into());
            }
        }

        // Links may be declared on either side; validate each once.
        let mut links: BTreeSet<(String, String)> = BTreeSet::new();
        for clue in &clues {
            for card_id in &clue.card_ids {
                links.insert((clue.clue_id.clone(), card_id.clone()));
            }
        }
        for card in &cards {
            for clue_id in &card.clue_ids {
                links.insert((clue_id.clone(), card.card_id.clone()));
            }
        }
        for (clue_id, card_id) in &links {
            match (clue_types.get(clue_id), card_types.get(card_id)) {
                (None, _) => push(
                    CARDS_FILE,
                    format!("card `{card_id}`"),
                    format!("references missing clue `{clue_id}`"),
                ),
                (Some(_), None) => push(
                    CLUES_FILE,
                    format!("clue `{clue_id}`"),
                    format!("links missing card `{card_id}`"),
                ),
                (Some(a), Some(b)) if a != b => push(
                    CLUES_FILE,
                    format!("clue `{clue_id}`"),
                    format!("links card `{card_id}` of failure type `{b}` but belongs to `{a}`"),
                ),
                _ => {}
            }
        }

        let mut terms: BTreeMap<String, usize> = BTreeMap::new();
        for (i, entry) in glossary.iter().enumerate() {
            let subject = format!("term `{}`", entry.term);
            if entry.short_definition.trim().is_empty() {
                push(GLOSSARY_FILE, subject.clone(), "empty short_definition".into());
            }
            if let Some(l) = &entry.external_link {
                if !is_url(l) {
                    push(GLOSSARY_FILE, subject.clone(), format!("external_link `{l}` is not an http(s) URL"));
                }
            }
            for name in std::iter::once(&entry.term).chain(&entry.synonyms) {
                let key = normalize_term(name);
                if key.is_empty() {
                    push(GLOSSARY_FILE, subject.clone(), "empty term or synonym".into());
                    continue;
                }
                match terms.get(&key) {
                    Some(&j) if j != i => push(
                        GLOSSARY_FILE,
                        subject.clone(),
                        format!("`{name}` duplicates term `{}`", glossary[j].term),
                    ),
                    _ => {
                        terms.insert(key, i);
                    }
                }
            }
        }

        if !v.is_empty() {
            return Err(CuratorError::Violations(v));
        }

        for clue in &mut clues {
            clue.card_ids = links
                .iter()
                .filter(|(c, _)| *c == clue.clue_id)
                .map(|(_, card)| card.clone())
                .collect();
        }
        for card in &mut cards {
            card.clue_ids = links
                .iter()
                .filter(|(_, c)| *c == card.card_id)
                .map(|(clue, _)| clue.clone())
                .collect();
        }
        Ok(Self {
            dictionary,
            cards,
            clues,
            glossary,
            terms,
        })
    }

    pub fn dictionary(&self) -> &FeatureDictionary {
        &self.dictionary
    }

    pub fn cards(&self) -> &[SolutionCard] {
        &self.cards
    }

    pub fn clues(&self) -> &[Clue] {
        &self.clues
    }

    pub fn glossary(&self) -> &[GlossaryEntry] {
        &self.glossary
    }

    pub fn failure_type(&self, id: &str) -> Option<&FailureType> {
        self.dictionary.failure_types.iter().find(|t| t.id == id)
    }

    fn require_type(&self, id: &str) -> Result<&FailureType> {
        self.failure_type(id)
            .ok_or_else(|| CuratorError::UnknownFailureType(id.to_string()))
    }

    pub fn clues_of<'a>(&'a self, failure_type_id: &'a str) -> impl Iterator<Item = &'a Clue> + 'a {
        self.clues.iter().filter(move |c| c.failure_type_id == failure_type_id)
    }

    pub fn query_solutions(&self, failure_type_id: &str, query: &SolutionQuery) -> Result<Vec<&SolutionCard>> {
        self.require_type(failure_type_id)?;
        for clue_id in &query.clue_ids {
            if !self.clues_of(failure_type_id).any(|c| &c.clue_id == clue_id) {
                return Err(CuratorError::UnknownClue {
                    failure_type_id: failure_type_id.to_string(),
                    clue_id: clue_id.clone(),
                });
            }
        }
        let mut out: Vec<&SolutionCard> = self
            .cards
            .iter()
            .filter(|c| c.failure_type_id == failure_type_id)
            .filter(|c| query.kind.is_none_or(|k| c.kind == k))
            .filter(|c| query.clue_ids.is_empty() || c.clue_ids.iter().any(|id| query.clue_ids.contains(id)))
            .filter(|c| query.difficulties.is_empty() || query.difficulties.contains(&c.difficulty))
            .collect();
        match query.sort {
            Some(DifficultySort::DifficultyAsc) => out.sort_by_key(|c| c.difficulty),
            Some(DifficultySort::DifficultyDesc) => out.sort_by_key(|c| std::cmp::Reverse(c.difficulty)),
            None => {}
        }
        Ok(out)
    }

    pub fn describe_failure(&self, failure_type_id: &str) -> Result<FailureDescription> {
        let failure_type = self.require_type(failure_type_id)?.clone();
        let visual_features: Vec<VisualFeature> = self.dictionary.features_of(failure_type_id).cloned().collect();
        let mut example_image_ids = Vec::new();
        for f in &visual_features {
            for id in &f.example_image_ids {
                if !example_image_ids.contains(id) {
                    example_image_ids.push(id.clone());
                }
            }
        }
        Ok(FailureDescription {
            failure_type,
            visual_features,
            example_image_ids,
            clues: self.clues_of(failure_type_id).cloned().collect(),
        })
    }

    /// Case-insensitive lookup by term or synonym; `None` when absent.
    pub fn lookup_term(&self, term: &str) -> Option<&GlossaryEntry> {
        self.terms.get(&normalize_term(term)).map(|&i| &self.glossary[i])
    }
}

pub fn write_ranked(comments: &[RankedComment], path: &Path) -> Result<()> {
    let mut out = String::new();
    for c in comments {
        out.push_str(&serde_json::to_string(c).expect("comment serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CuratorError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
