//! Canonical thread store built from line-delimited community dumps.
//!
//! A dump line is one post object with its comments embedded:
//!
//! ```json
//! {"post_id":"abc","created_utc":1609459200,"title":"...","selftext":"...",
//!  "media":["https://i.example/1.jpg"],
//!  "comments":[{"comment_id":"c1","created_utc":1609459800,"body":"...","score":4,"parent_id":"abc"}]}
//! ```
//!
//! The on-disk store is a directory holding `threads.jsonl` (one canonical
//! [`Post`] per line, ordered by creation time then id), `rejects.jsonl`
//! (every rejected dump line) and, after export, `image_manifest.json`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const THREADS_FILE: &str = "threads.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const IMAGE_MANIFEST_FILE: &str = "image_manifest.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read dump {path}: {source}")]
    UnreadableSource {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt store file {path} line {line}: {message}")]
    CorruptStore {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("store is empty")]
    EmptyStore,
    #[error("no posts fall inside the requested date range")]
    EmptyRange,
    #[error("min_comments must be at least 1")]
    InvalidThreshold,
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub comment_id: String,
    pub created_at: DateTime<Utc>,
    pub body: String,
    pub upvotes: u32,
    pub parent_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub created_at: DateTime<Utc>,
    pub title: String,
    pub body: String,
    pub image_refs: Vec<ImageRef>,
    /// Sorted ascending by `created_at`, then `comment_id`.
    pub comments: Vec<Comment>,
}

impl Post {
    /// Minutes from post creation to the earliest comment.
    pub fn first_comment_latency_minutes(&self) -> Option<f64> {
        self.comments
            .iter()
            .map(|c| c.created_at)
            .min()
            .map(|first| (first - self.created_at).num_milliseconds() as f64 / 60_000.0)
    }
}

/// Raw dump record, as found on one line of the input.
#[derive(Debug, Deserialize)]
struct RawPost {
    post_id: String,
    created_utc: i64,
    #[serde(default)]
    title: String,
    #[serde(default)]
    selftext: String,
    #[serde(default)]
    media: Vec<String>,
    #[serde(default)]
    comments: Vec<RawComment>,
}

#[derive(Debug, Deserialize)]
struct RawComment {
    comment_id: String,
    created_utc: i64,
    #[serde(default)]
    body: String,
    #[serde(default)]
    score: i64,
    parent_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number in the dump.
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejects: Vec<Reject>,
    /// Blank lines are skipped and not counted as records.
    pub blank_lines: usize,
}

fn timestamp(secs: i64) -> std::result::Result<DateTime<Utc>, String> {
    Utc.timestamp_opt(secs, 0)
        .single()
        .ok_or_else(|| format!("timestamp {secs} out of range"))
}

impl RawPost {
    fn into_post(self) -> std::result::Result<Post, String> {
        if self.post_id.trim().is_empty() {
            return Err("empty post_id".into());
        }
        let created_at = timestamp(self.created_utc)?;
        let mut image_refs = Vec::with_capacity(self.media.len());
        for (i, locator) in self.media.into_iter().enumerate() {
            if locator.trim().is_empty() {
                return Err(format!("media entry {i} has an empty locator"));
            }
            image_refs.push(ImageRef {
                image_id: format!("{}_{}", self.post_id, i),
                locator,
                width: None,
                height: None,
            });
        }
        let mut seen = HashSet::new();
        let mut comments = Vec::with_capacity(self.comments.len());
        for c in self.comments {
            if c.comment_id.trim().is_empty() {
                return Err("comment with empty comment_id".into());
            }
            if !seen.insert(c.comment_id.clone()) {
                return Err(format!("duplicate comment_id {}", c.comment_id));
            }
            let c_at = timestamp(c.created_utc)?;
            if c_at < created_at {
                return Err(format!("comment {} predates its post", c.comment_id));
            }
            comments.push(Comment {
                comment_id: c.comment_id,
                created_at: c_at,
                body: c.body,
                // Community scores can go negative; the store keeps non-negative upvotes.
                upvotes: c.score.clamp(0, u32::MAX as i64) as u32,
                parent_id: c.parent_id,
            });
        }
        comments.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then_with(|| a.comment_id.cmp(&b.comment_id))
        });
        Ok(Post {
            post_id: self.post_id,
            created_at,
            title: self.title,
            body: self.selftext,
            image_refs,
            comments,
        })
    }
}

/// Half-open UTC interval `[from, to)`; either bound may be open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DateRange {
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl DateRange {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.from.is_none_or(|f| t >= f) && self.to.is_none_or(|e| t < e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_posts: usize,
    pub posts_per_year: BTreeMap<i32, usize>,
    pub unanswered_fraction: f64,
    pub le3_comment_fraction: f64,
    /// Mean over posts with at least one comment; `None` when every post is unanswered.
    pub mean_first_comment_latency_minutes: Option<f64>,
}

impl CorpusStats {
    /// Flat `key=value` report, one entry per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("total_posts={}\n", self.total_posts));
        out.push_str(&format!("unanswered_fraction={}\n", self.unanswered_fraction));
        out.push_str(&format!("le3_comment_fraction={}\n", self.le3_comment_fraction));
        match self.mean_first_comment_latency_minutes {
            Some(m) => out.push_str(&format!("mean_first_comment_latency_minutes={m}\n")),
            None => out.push_str("mean_first_comment_latency_minutes=\n"),
        }
        for (year, n) in &self.posts_per_year {
            out.push_str(&format!("posts_per_year.{year}={n}\n"));
        }
        out
    }
}

/// In-memory thread store. Read-only once ingestion is finished.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Store {
    posts: Vec<Post>,
    ids: HashSet<String>,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    /// Posts ordered by creation time, then id.
    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn get(&self, post_id: &str) -> Option<&Post> {
        self.posts.iter().find(|p| p.post_id == post_id)
    }

    /// Inserts a post unless its id is already present. Returns whether it was added.
    pub fn insert(&mut self, post: Post) -> bool {
        if !self.ids.insert(post.post_id.clone()) {
            return false;
        }
        let key = (post.created_at, post.post_id.clone());
        let at = self
            .posts
            .partition_point(|p| (p.created_at, p.post_id.as_str()) < (key.0, key.1.as_str()));
        self.posts.insert(at, post);
        true
    }

    pub fn from_posts(posts: impl IntoIterator<Item = Post>) -> Self {
        let mut store = Store::new();
        for p in posts {
            store.insert(p);
        }
        store
    }

    /// Reads a dump into a fresh store.
    pub fn ingest_dump(source: &Path) -> Result<(Store, IngestReport)> {
        let mut store = Store::new();
        let report = store.ingest_more(source)?;
        Ok((store, report))
    }

    /// Appends a dump to this store; ids already present are rejected, so
    /// re-ingesting a dump leaves the store unchanged.
    pub fn ingest_more(&mut self, source: &Path) -> Result<IngestReport> {
        let file = File::open(source).map_err(|e| CorpusError::UnreadableSource {
            path: source.to_path_buf(),
            source: e,
        })?;
        self.ingest_reader(BufReader::new(file))
            .map_err(|e| CorpusError::UnreadableSource {
                path: source.to_path_buf(),
                source: e,
            })
    }

    pub fn ingest_reader<R: BufRead>(&mut self, reader: R) -> std::io::Result<IngestReport> {
        let mut report = IngestReport::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if line.trim().is_empty() {
                report.blank_lines += 1;
                continue;
            }
            let raw: RawPost = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    report.rejects.push(Reject {
                        line: line_no,
                        post_id: None,
                        reason: format!("malformed record: {e}"),
                    });
                    continue;
                }
            };
            let post_id = raw.post_id.clone();
            match raw.into_post() {
                Ok(post) => {
                    if self.insert(post) {
                        report.accepted += 1;
                    } else {
                        report.rejects.push(Reject {
                            line: line_no,
                            post_id: Some(post_id.clone()),
                            reason: format!("duplicate post_id {post_id}"),
                        });
                    }
                }
                Err(reason) => report.rejects.push(Reject {
                    line: line_no,
                    post_id: Some(post_id),
                    reason,
                }),
            }
        }
        Ok(report)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |e| CorpusError::Io { path, source: e }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(THREADS_FILE);
        let tmp = dir.join(format!("{THREADS_FILE}.tmp"));
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io(&tmp))?);
            for post in &self.posts {
                let line = serde_json::to_string(post).expect("posts serialize");
                writeln!(w, "{line}").map_err(io(&tmp))?;
            }
            w.flush().map_err(io(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Store> {
        let path = dir.join(THREADS_FILE);
        let file = File::open(&path).map_err(|e| CorpusError::Io {
            path: path.clone(),
            source: e,
        })?;
        let mut store = Store::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CorpusError::Io {
                path: path.clone(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let post: Post = serde_json::from_str(&line).map_err(|e| CorpusError::CorruptStore {
                path: path.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            store.insert(post);
        }
        Ok(store)
    }

    /// Appends rejects to the store's reject log.
    pub fn append_rejects(dir: &Path, rejects: &[Reject]) -> Result<()> {
        let path = dir.join(REJECTS_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CorpusError::Io {
                path: path.clone(),
                source: e,
            })?;
        for r in rejects {
            writeln!(f, "{}", serde_json::to_string(r).expect("reject serializes")).map_err(
                |e| CorpusError::Io {
                    path: path.clone(),
                    source: e,
                },
            )?;
        }
        Ok(())
    }

    pub fn compute_stats(&self, filter: Option<DateRange>) -> Result<CorpusStats> {
        if self.posts.is_empty() {
            return Err(CorpusError::EmptyStore);
        }
        let range = filter.unwrap_or_default();
        let selected: Vec<&Post> = self
            .posts
            .iter()
            .filter(|p| range.contains(p.created_at))
            .collect();
        if selected.is_empty() {
            return Err(CorpusError::EmptyRange);
        }
        let n = selected.len() as f64;
        let mut posts_per_year = BTreeMap::new();
        let mut unanswered = 0usize;
        let mut le3 = 0usize;
        let mut latency_sum = 0.0;
        let mut answered = 0usize;
        for p in &selected {
            *posts_per_year.entry(p.created_at.year()).or_insert(0) += 1;
            let c = p.comments.len();
            if c == 0 {
                unanswered += 1;
            }
            if c <= 3 {
                le3 += 1;
            }
            if let Some(lat) = p.first_comment_latency_minutes() {
                latency_sum += lat;
                answered += 1;
            }
        }
        Ok(CorpusStats {
            total_posts: selected.len(),
            posts_per_year,
            unanswered_fraction: unanswered as f64 / n,
            le3_comment_fraction: le3 as f64 / n,
            mean_first_comment_latency_minutes: (answered > 0)
                .then(|| latency_sum / answered as f64),
        })
    }

    /// Posts with at least `min_comments` comments, in store order.
    pub fn posts_with_comments(&self, min_comments: usize) -> Result<Vec<&Post>> {
        if min_comments < 1 {
            return Err(CorpusError::InvalidThreshold);
        }
        Ok(self
            .posts
            .iter()
            .filter(|p| p.comments.len() >= min_comments)
            .collect())
    }

    pub fn image_refs(&self) -> impl Iterator<Item = (&Post, &ImageRef)> {
        self.posts
            .iter()
            .flat_map(|p| p.image_refs.iter().map(move |r| (p, r)))
    }

    /// Materializes every image into `destination`. Failures are recorded per
    /// image; the batch never aborts on a single bad locator.
    pub fn export_images(&self, destination: &Path) -> Result<ImageManifest> {
        fs::create_dir_all(destination).map_err(|e| CorpusError::Io {
            path: destination.to_path_buf(),
            source: e,
        })?;
        let mut fetcher = Fetcher::default();
        let mut entries = BTreeMap::new();
        for (_, image) in self.image_refs() {
            let entry = match materialize(&mut fetcher, image, destination) {
                Ok((path, width, height)) => ImageStatus::Materialized {
                    path,
                    width,
                    height,
                },
                Err(reason) => ImageStatus::Unavailable { reason },
            };
            entries.insert(image.image_id.clone(), entry);
        }
        Ok(ImageManifest { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ImageStatus {
    Materialized {
        path: PathBuf,
        width: u32,
        height: u32,
    },
    Unavailable {
        reason: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub entries: BTreeMap<String, ImageStatus>,
}

impl ImageManifest {
    pub fn path_of(&self, image_id: &str) -> Option<&Path> {
        match self.entries.get(image_id)? {
            ImageStatus::Materialized { path, .. } => Some(path),
            ImageStatus::Unavailable { .. } => None,
        }
    }

    pub fn materialized_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| matches!(e, ImageStatus::Materialized { .. }))
            .count()
    }

    pub fn unavailable_count(&self) -> usize {
        self.entries.len() - self.materialized_count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::CorruptStore {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Default)]
struct Fetcher {
    client: Option<reqwest::blocking::Client>,
}

impl Fetcher {
    fn fetch(&mut self, locator: &str) -> std::result::Result<Vec<u8>, String> {
        if locator.starts_with("http://") || locator.starts_with("https://") {
            let client = match &self.client {
                Some(c) => c,
                None => {
                    let c = reqwest::blocking::Client::builder()
                        .timeout(std::time::Duration::from_secs(30))
                        .build()
                        .map_err(|e| e.to_string())?;
                    self.client.insert(c)
                }
            };
            let resp = client.get(locator).send().map_err(|e| e.to_string())?;
            if !resp.status().is_success() {
                return Err(format!("HTTP {}", resp.status()));
            }
            resp.bytes().map(|b| b.to_vec()).map_err(|e| e.to_string())
        } else {
            let path = locator.strip_prefix("file://").unwrap_or(locator);
            fs::read(path).map_err(|e| e.to_string())
        }
    }
}

fn materialize(
    fetcher: &mut Fetcher,
    image: &ImageRef,
    destination: &Path,
) -> std::result::Result<(PathBuf, u32, u32), String> {
    let bytes = fetcher.fetch(&image.locator)?;
    let format = image::guess_format(&bytes).map_err(|e| format!("undecodable image: {e}"))?;
    let decoded = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| format!("undecodable image: {e}"))?;
    let ext = format.extensions_str().first().copied().unwrap_or("img");
    let path = destination.join(format!("{}.{ext}", sanitize(&image.image_id)));
    fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    Ok((path, decoded.width(), decoded.height()))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}
