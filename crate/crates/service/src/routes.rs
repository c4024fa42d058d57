use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Multipart, Path, RawQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::Json;
use chrono::{DateTime, Utc};
use printfix_core::curator::{Difficulty, DifficultySort, SolutionCard, SolutionKind, SolutionQuery};
use printfix_core::diagnosis::{DiagnosisEntry, DiagnosisResult, LikelihoodBin};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{ApiError, ApiResult};
use crate::sessions::{StoredImage, UploadSession, ValidatedImage};
use crate::AppState;

type AppStateRef = State<Arc<AppState>>;

pub async fn health(State(state): AppStateRef) -> Json<serde_json::Value> {
    let models: Vec<&str> = state.engine().map(|e| e.failure_types().collect()).unwrap_or_default();
    Json(json!({
        "status": "ok",
        "models": models,
        "failure_types": state.kb().dictionary().failure_types.len(),
    }))
}

pub async fn not_found() -> ApiError {
    ApiError::not_found("route_not_found", "no such endpoint")
}

pub async fn guide() -> Html<&'static str> {
    Html(include_str!("guide.html"))
}

// ---- uploads ---------------------------------------------------------------

#[derive(Serialize)]
struct UploadResponse {
    session_id: String,
    image_ids: Vec<String>,
    expires_at: DateTime<Utc>,
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", "upload exceeds the size limit")
    } else {
        ApiError::bad_request("invalid_multipart", format!("malformed multipart body: {}", e.body_text()))
    }
}

pub async fn upload(State(state): AppStateRef, mut multipart: Multipart) -> ApiResult<impl IntoResponse> {
    let max_images = state.config.max_images_per_upload;
    let max_bytes = state.config.max_image_bytes;
    let mut parts: Vec<(String, Vec<u8>)> = Vec::new();
    while let Some(mut field) = multipart.next_field().await.map_err(multipart_error)? {
        let Some(filename) = field.file_name().map(str::to_string) else { continue };
        if parts.len() == max_images {
            return Err(ApiError::bad_request(
                "too_many_images",
                format!("at most {max_images} images per upload"),
            )
            .with_details(json!({ "limit": max_images })));
        }
        let mut bytes = Vec::new();
        while let Some(chunk) = field.chunk().await.map_err(multipart_error)? {
            bytes.extend_from_slice(&chunk);
            if bytes.len() > max_bytes {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    "image_too_large",
                    format!("`{filename}` exceeds the {max_bytes} byte limit"),
                )
                .with_details(json!({ "filename": filename, "limit": max_bytes })));
            }
        }
        parts.push((filename, bytes));
    }
    if parts.is_empty() {
        return Err(ApiError::bad_request("no_images", "upload at least one image file"));
    }
    let validated = tokio::task::spawn_blocking(move || validate_images(parts))
        .await
        .map_err(ApiError::internal)??;
    let session = state.sessions().create(validated, Utc::now())?;
    Ok((
        StatusCode::CREATED,
        Json(UploadResponse {
            session_id: session.session_id.clone(),
            image_ids: session.images.iter().map(|i| i.image_id.clone()).collect(),
            expires_at: session.expires_at,
        }),
    ))
}

fn validate_images(parts: Vec<(String, Vec<u8>)>) -> ApiResult<Vec<ValidatedImage>> {
    parts
        .into_iter()
        .map(|(filename, bytes)| {
            let undecodable = || {
                ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "undecodable_image",
                    format!("`{filename}` is not a decodable image"),
                )
                .with_details(json!({ "filename": filename }))
            };
            let format = image::guess_format(&bytes).map_err(|_| undecodable())?;
            let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|_| undecodable())?;
            Ok(ValidatedImage {
                width: decoded.width(),
                height: decoded.height(),
                filename: filename.clone(),
                bytes,
                format,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct SessionImageDoc<'a> {
    image_id: &'a str,
    original_filename: &'a str,
    byte_size: usize,
    sha256: &'a str,
    width: u32,
    height: u32,
    url: String,
}

pub async fn session(State(state): AppStateRef, Path(session_id): Path<String>) -> ApiResult<impl IntoResponse> {
    let s = state.sessions().get(&session_id, Utc::now())?;
    let images: Vec<SessionImageDoc> = s
        .images
        .iter()
        .map(|i| SessionImageDoc {
            image_id: &i.image_id,
            original_filename: &i.original_filename,
            byte_size: i.byte_size,
            sha256: &i.sha256,
            width: i.width,
            height: i.height,
            url: image_url(&s.session_id, &i.image_id),
        })
        .collect();
    Ok(Json(json!({
        "session_id": s.session_id,
        "created_at": s.created_at,
        "expires_at": s.expires_at,
        "images": images,
    })))
}

fn lookup<'a>(session: &'a UploadSession, image_id: &str) -> ApiResult<&'a StoredImage> {
    session
        .image(image_id)
        .ok_or_else(|| ApiError::not_found("image_not_found", format!("unknown image `{image_id}` in this session")))
}

fn image_url(session_id: &str, image_id: &str) -> String {
    format!("/api/sessions/{session_id}/images/{image_id}")
}

pub async fn image(
    State(state): AppStateRef,
    Path((session_id, image_id)): Path<(String, String)>,
) -> ApiResult<Response> {
    let s = state.sessions().get(&session_id, Utc::now())?;
    let img = lookup(&s, &image_id)?;
    let bytes = state.sessions().image_bytes(&s, img)?;
    Ok(([(header::CONTENT_TYPE, img.content_type.clone())], bytes).into_response())
}

// ---- diagnosis -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    All,
    BestGuess,
}

impl Mode {
    fn parse(s: &str) -> ApiResult<Self> {
        match s {
            "all" => Ok(Mode::All),
            "best_guess" => Ok(Mode::BestGuess),
            _ => Err(ApiError::invalid_parameter("mode", s, &["all", "best_guess"])),
        }
    }
}

#[derive(Deserialize)]
struct DiagnosisRequest {
    session_id: String,
    image_id: String,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    debug: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDoc {
    pub failure_type_id: String,
    pub display_name: String,
    pub bin: LikelihoodBin,
    pub bin_label: String,
    pub saliency_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisDoc {
    pub session_id: String,
    pub image_id: String,
    pub mode: Mode,
    /// `ok`, or `no_confident_match` when best-guess mode filters out every entry.
    pub status: String,
    pub entries: Vec<EntryDoc>,
}

/// Best guess keeps only Highly Likely entries; all keeps every entry.
pub fn select_entries(entries: &[DiagnosisEntry], mode: Mode) -> Vec<&DiagnosisEntry> {
    entries
        .iter()
        .filter(|e| mode == Mode::All || e.bin == LikelihoodBin::HighlyLikely)
        .collect()
}

fn overlay_size(width: u32, height: u32, max_side: u32) -> (u32, u32) {
    let longest = width.max(height).max(1);
    if longest <= max_side {
        return (width.max(1), height.max(1));
    }
    let scale = max_side as f64 / longest as f64;
    (
        ((width as f64 * scale).round() as u32).max(1),
        ((height as f64 * scale).round() as u32).max(1),
    )
}

async fn diagnosis_for(state: &Arc<AppState>, session: &UploadSession, image: &StoredImage) -> ApiResult<Arc<DiagnosisResult>> {
    let engine = state
        .engine()
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_models", "no diagnosis models are deployed"))?;
    let key = (session.session_id.clone(), image.image_id.clone());
    if let Some(r) = state.cached_result(&key) {
        return Ok(r);
    }
    let bytes = state.sessions().image_bytes(session, image)?;
    let overlay = overlay_size(image.width, image.height, state.config.saliency_max_side);
    let image_id = image.image_id.clone();
    let result = tokio::task::spawn_blocking(move || engine.diagnose(&image_id, &bytes, Some(overlay)))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| match e {
            printfix_core::diagnosis::DiagnosisError::UndecodableImage(m) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "undecodable_image", m)
            }
            other => ApiError::internal(other),
        })?;
    let result = Arc::new(result);
    state.cache_result(key, result.clone());
    Ok(result)
}

pub async fn diagnose(State(state): AppStateRef, body: Bytes) -> ApiResult<Json<DiagnosisDoc>> {
    let req: DiagnosisRequest = serde_json::from_slice(&body).map_err(|e| {
        ApiError::bad_request("invalid_request", format!("expected {{session_id, image_id, mode}}: {e}"))
    })?;
    let mode = Mode::parse(req.mode.as_deref().unwrap_or("all"))?;
    let session = state.sessions().get(&req.session_id, Utc::now())?;
    let image = lookup(&session, &req.image_id)?;
    let result = diagnosis_for(&state, &session, image).await?;
    let show_p = state.config.debug_probabilities || req.debug;
    let kb = state.kb();
    let entries: Vec<EntryDoc> = select_entries(&result.entries, mode)
        .into_iter()
        .map(|e| EntryDoc {
            failure_type_id: e.failure_type_id.clone(),
            display_name: kb
                .failure_type(&e.failure_type_id)
                .map(|t| t.display_name.clone())
                .filter(|n| !n.is_empty())
                .unwrap_or_else(|| e.failure_type_id.replace('_', " ")),
            bin: e.bin,
            bin_label: e.bin.label().to_string(),
            saliency_url: format!(
                "{}/saliency/{}",
                image_url(&session.session_id, &image.image_id),
                e.failure_type_id
            ),
            probability: show_p.then_some(e.probability),
        })
        .collect();
    let status = if mode == Mode::BestGuess && entries.is_empty() {
        "no_confident_match"
    } else {
        "ok"
    };
    Ok(Json(DiagnosisDoc {
        session_id: session.session_id.clone(),
        image_id: image.image_id.clone(),
        mode,
        status: status.to_string(),
        entries,
    }))
}

pub async fn saliency(
    State(state): AppStateRef,
    Path((session_id, image_id, failure_type_id)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    let failure_type_id = failure_type_id.strip_suffix(".png").unwrap_or(&failure_type_id).to_string();
    let session = state.sessions().get(&session_id, Utc::now())?;
    let image = lookup(&session, &image_id)?;
    let result = diagnosis_for(&state, &session, image).await?;
    let entry = result
        .entry(&failure_type_id)
        .ok_or_else(|| ApiError::not_found("unknown_failure_type", format!("no model for `{failure_type_id}`")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], entry.saliency.to_png()).into_response())
}

// ---- knowledge base --------------------------------------------------------

pub async fn failures(State(state): AppStateRef) -> Json<serde_json::Value> {
    let kb = state.kb();
    let modeled: Vec<&str> = state.engine().map(|e| e.failure_types().collect()).unwrap_or_default();
    let list: Vec<_> = kb
        .dictionary()
        .failure_types
        .iter()
        .map(|t| {
            json!({
                "id": t.id,
                "display_name": t.display_name,
                "has_model": modeled.contains(&t.id.as_str()),
            })
        })
        .collect();
    Json(json!({ "failure_types": list }))
}

pub async fn failure(State(state): AppStateRef, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let kb = state.kb();
    let d = kb
        .describe_failure(&id)
        .map_err(|_| ApiError::not_found("unknown_failure_type", format!("unknown failure type `{id}`")))?;
    let has_model = state.engine().is_some_and(|e| e.failure_types().any(|t| t == id));
    let mut doc = serde_json::to_value(&d).map_err(ApiError::internal)?;
    doc["has_model"] = json!(has_model);
    Ok(Json(doc))
}

fn split_values(raw: &str) -> impl Iterator<Item = String> + '_ {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string)
}

/// Parses `kind`, `clue`, `difficulty` and `sort`. `clue` and `difficulty`
/// may repeat or carry comma-separated values.
pub fn parse_solution_query(raw: Option<&str>) -> ApiResult<SolutionQuery> {
    let mut q = SolutionQuery::default();
    for (key, value) in form_urlencoded::parse(raw.unwrap_or("").as_bytes()) {
        match key.as_ref() {
            "kind" if value.is_empty() => {}
            "kind" => {
                q.kind = Some(
                    value
                        .parse::<SolutionKind>()
                        .map_err(|_| ApiError::invalid_parameter("kind", &value, &["common", "specific"]))?,
                )
            }
            "clue" => q.clue_ids.extend(split_values(&value)),
            "difficulty" => {
                for d in split_values(&value) {
                    let parsed = d.parse::<Difficulty>().map_err(|_| {
                        ApiError::invalid_parameter("difficulty", &d, &["Basic", "Intermediate", "Advanced"])
                    })?;
                    if !q.difficulties.contains(&parsed) {
                        q.difficulties.push(parsed);
                    }
                }
            }
            "sort" if value.is_empty() => {}
            "sort" => {
                q.sort = Some(value.parse::<DifficultySort>().map_err(|_| {
                    ApiError::invalid_parameter("sort", &value, &["difficulty_asc", "difficulty_desc"])
                })?)
            }
            _ => {}
        }
    }
    Ok(q)
}

pub async fn solutions(
    State(state): AppStateRef,
    Path(id): Path<String>,
    RawQuery(raw): RawQuery,
) -> ApiResult<Json<serde_json::Value>> {
    let query = parse_solution_query(raw.as_deref())?;
    let kb = state.kb();
    let cards: Vec<SolutionCard> = kb
        .query_solutions(&id, &query)
        .map_err(|e| match e {
            printfix_core::curator::CuratorError::UnknownFailureType(_) => {
                ApiError::not_found("unknown_failure_type", format!("unknown failure type `{id}`"))
            }
            printfix_core::curator::CuratorError::UnknownClue { clue_id, .. } => {
                let allowed: Vec<String> = kb.clues_of(&id).map(|c| c.clue_id.clone()).collect();
                ApiError::bad_request("unknown_clue", format!("unknown clue `{clue_id}` for `{id}`"))
                    .with_details(json!({ "parameter": "clue", "allowed": allowed }))
            }
            other => ApiError::internal(other),
        })?
        .into_iter()
        .cloned()
        .collect();
    let clues: Vec<_> = kb.clues_of(&id).cloned().collect();
    Ok(Json(json!({ "failure_type_id": id, "cards": cards, "clues": clues })))
}

pub async fn glossary(State(state): AppStateRef) -> Json<serde_json::Value> {
    Json(json!({ "terms": state.kb().glossary() }))
}

pub async fn glossary_term(State(state): AppStateRef, Path(term): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let kb = state.kb();
    let entry = kb
        .lookup_term(&term)
        .ok_or_else(|| ApiError::not_found("term_not_found", format!("no glossary entry for `{term}`")))?;
    Ok(Json(serde_json::to_value(entry).map_err(ApiError::internal)?))
}

// ---- feedback --------------------------------------------------------------

#[derive(Deserialize)]
struct FeedbackRequest {
    #[serde(default)]
    session_id: Option<String>,
    #[serde(default)]
    answers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub answers: BTreeMap<String, String>,
    pub timestamp: DateTime<Utc>,
}

pub async fn feedback(State(state): AppStateRef, body: Bytes) -> ApiResult<impl IntoResponse> {
    let empty = || ApiError::bad_request("empty_feedback", "feedback needs at least one non-empty answer");
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(empty());
    }
    let req: FeedbackRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request("invalid_request", format!("expected {{answers: {{...}}}}: {e}")))?;
    let answers: BTreeMap<String, String> = req
        .answers
        .into_iter()
        .map(|(k, v)| (k, v.trim().to_string()))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if answers.is_empty() {
        return Err(empty());
    }
    let record = FeedbackRecord {
        feedback_id: uuid::Uuid::new_v4().simple().to_string(),
        session_id: req.session_id.filter(|s| !s.is_empty()),
        answers,
        timestamp: Utc::now(),
    };
    let line = serde_json::to_string(&record).map_err(ApiError::internal)?;
    state.append_feedback(&line).map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(json!({ "feedback_id": record.feedback_id }))))
}
