//! Upload sessions persisted on disk, one directory per session:
//! `session.json` plus the stored image files.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ApiResult};

const SESSION_FILE: &str = "session.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredImage {
    pub image_id: String,
    pub original_filename: String,
    /// File name inside the session directory.
    pub stored_name: String,
    pub byte_size: usize,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    pub content_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadSession {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub images: Vec<StoredImage>,
}

impl UploadSession {
    pub fn image(&self, image_id: &str) -> Option<&StoredImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }
}

/// An upload part that already decoded successfully.
pub struct ValidatedImage {
    pub filename: String,
    pub bytes: Vec<u8>,
    pub format: image::ImageFormat,
    pub width: u32,
    pub height: u32,
}

pub struct SessionStore {
    root: PathBuf,
    ttl: Duration,
}

fn is_session_id(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

impl SessionStore {
    pub fn open(data_dir: &Path, ttl_hours: u64) -> std::io::Result<Self> {
        let root = data_dir.join("sessions");
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            ttl: Duration::hours(ttl_hours as i64),
        })
    }

    fn dir(&self, session_id: &str) -> PathBuf {
        self.root.join(session_id)
    }

    /// Persists all images or none: files are written to a staging directory
    /// that is renamed into place only after every write succeeded.
    pub fn create(&self, images: Vec<ValidatedImage>, now: DateTime<Utc>) -> ApiResult<UploadSession> {
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let staging = self.root.join(format!(".staging-{session_id}"));
        let result = (|| -> std::io::Result<UploadSession> {
            fs::create_dir_all(&staging)?;
            let mut stored = Vec::with_capacity(images.len());
            for (i, img) in images.into_iter().enumerate() {
                let image_id = format!("img{}", i + 1);
                let ext = img.format.extensions_str().first().copied().unwrap_or("bin");
                let stored_name = format!("{image_id}.{ext}");
                fs::write(staging.join(&stored_name), &img.bytes)?;
                stored.push(StoredImage {
                    image_id,
                    original_filename: img.filename,
                    stored_name,
                    byte_size: img.bytes.len(),
                    sha256: hex::encode(Sha256::digest(&img.bytes)),
                    width: img.width,
                    height: img.height,
                    content_type: img.format.to_mime_type().to_string(),
                });
            }
            let session = UploadSession {
                session_id: session_id.clone(),
                created_at: now,
                expires_at: now + self.ttl,
                images: stored,
            };
            fs::write(
                staging.join(SESSION_FILE),
                serde_json::to_vec_pretty(&session).expect("session serializes"),
            )?;
            fs::rename(&staging, self.dir(&session_id))?;
            Ok(session)
        })();
        result.map_err(|e| {
            let _ = fs::remove_dir_all(&staging);
            ApiError::internal(format!("storing upload: {e}"))
        })
    }

    pub fn get(&self, session_id: &str, now: DateTime<Utc>) -> ApiResult<UploadSession> {
        let not_found = || ApiError::not_found("session_not_found", format!("unknown session `{session_id}`"));
        if !is_session_id(session_id) {
            return Err(not_found());
        }
        let text = match fs::read(self.dir(session_id).join(SESSION_FILE)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(not_found()),
            Err(e) => return Err(ApiError::internal(e)),
        };
        let session: UploadSession = serde_json::from_slice(&text).map_err(ApiError::internal)?;
        if session.expires_at <= now {
            return Err(ApiError::not_found("session_expired", format!("session `{session_id}` has expired")));
        }
        Ok(session)
    }

    pub fn image_bytes(&self, session: &UploadSession, image: &StoredImage) -> ApiResult<Vec<u8>> {
        fs::read(self.dir(&session.session_id).join(&image.stored_name)).map_err(ApiError::internal)
    }

    /// Deletes expired sessions and abandoned staging directories.
    pub fn purge_expired(&self, now: DateTime<Utc>) -> usize {
        let Ok(entries) = fs::read_dir(&self.root) else { return 0 };
        let mut removed = 0;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            let expired = if name.starts_with(".staging-") {
                entry
                    .metadata()
                    .and_then(|m| m.modified())
                    .map(|t| DateTime::<Utc>::from(t) + Duration::hours(1) < now)
                    .unwrap_or(false)
            } else if is_session_id(&name) {
                fs::read(entry.path().join(SESSION_FILE))
                    .ok()
                    .and_then(|b| serde_json::from_slice::<UploadSession>(&b).ok())
                    .map(|s| s.expires_at <= now)
                    .unwrap_or(false)
            } else {
                false
            };
            if expired && fs::remove_dir_all(entry.path()).is_ok() {
                removed += 1;
            }
        }
        removed
    }
}
