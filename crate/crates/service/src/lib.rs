//! HTTP service: photo upload sessions, diagnosis with likelihood bins and
//! saliency images, failure descriptions, solution queries, glossary lookup
//! and feedback collection. All bodies are JSON except images.

pub mod config;
pub mod error;
pub mod routes;
pub mod sessions;

use std::collections::HashMap;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::{ConnectInfo, DefaultBodyLimit, Request, State};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use printfix_core::curator::KnowledgeBase;
use printfix_core::diagnosis::{DiagnosisEngine, DiagnosisError, DiagnosisResult};
use tower_http::services::ServeDir;

pub use config::ServiceConfig;
use error::ApiError;
use sessions::SessionStore;

#[derive(Debug)]
pub struct StartupError(pub String);

impl std::fmt::Display for StartupError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for StartupError {}

const RESULT_CACHE_LIMIT: usize = 256;

pub struct AppState {
    pub config: ServiceConfig,
    engine: Option<Arc<DiagnosisEngine>>,
    kb: RwLock<Arc<KnowledgeBase>>,
    sessions: SessionStore,
    feedback_lock: Mutex<()>,
    results: Mutex<HashMap<(String, String), Arc<DiagnosisResult>>>,
    rate: Mutex<HashMap<IpAddr, (Instant, u32)>>,
}

impl AppState {
    /// Loads the knowledge base and every deployed bundle. A missing or empty
    /// bundle directory is allowed (diagnosis then answers 503); a corrupt
    /// bundle is a startup error.
    pub fn from_config(config: ServiceConfig) -> Result<Self, StartupError> {
        let kb = KnowledgeBase::load(&config.kb_dir).map_err(|e| StartupError(format!("knowledge base: {e}")))?;
        let engine = if config.bundle_dir.is_dir() {
            match DiagnosisEngine::load_dir(&config.bundle_dir) {
                Ok(engine) => Some(Arc::new(engine)),
                Err(DiagnosisError::NoBundles) => None,
                Err(e) => return Err(StartupError(format!("model bundles: {e}"))),
            }
        } else {
            None
        };
        Self::with_shared_engine(config, kb, engine)
    }

    pub fn new(config: ServiceConfig, kb: KnowledgeBase, engine: Option<DiagnosisEngine>) -> Result<Self, StartupError> {
        Self::with_shared_engine(config, kb, engine.map(Arc::new))
    }

    pub fn with_shared_engine(
        config: ServiceConfig,
        kb: KnowledgeBase,
        engine: Option<Arc<DiagnosisEngine>>,
    ) -> Result<Self, StartupError> {
        config.validate().map_err(|e| StartupError(e.to_string()))?;
        let sessions = SessionStore::open(&config.data_dir, config.session_ttl_hours)
            .map_err(|e| StartupError(format!("data directory: {e}")))?;
        sessions.purge_expired(chrono::Utc::now());
        Ok(Self {
            config,
            engine,
            kb: RwLock::new(Arc::new(kb)),
            sessions,
            feedback_lock: Mutex::new(()),
            results: Mutex::new(HashMap::new()),
            rate: Mutex::new(HashMap::new()),
        })
    }

    pub fn kb(&self) -> Arc<KnowledgeBase> {
        self.kb.read().expect("kb lock poisoned").clone()
    }

    /// Reloads the knowledge base from `kb_dir`; the current handle stays in
    /// place if the new content is rejected.
    pub fn reload_kb(&self) -> Result<(), printfix_core::curator::CuratorError> {
        let fresh = KnowledgeBase::load(&self.config.kb_dir)?;
        *self.kb.write().expect("kb lock poisoned") = Arc::new(fresh);
        self.results.lock().expect("cache lock poisoned").clear();
        Ok(())
    }

    pub fn engine(&self) -> Option<&Arc<DiagnosisEngine>> {
        self.engine.as_ref()
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    pub(crate) fn cached_result(&self, key: &(String, String)) -> Option<Arc<DiagnosisResult>> {
        self.results.lock().expect("cache lock poisoned").get(key).cloned()
    }

    pub(crate) fn cache_result(&self, key: (String, String), result: Arc<DiagnosisResult>) {
        let mut cache = self.results.lock().expect("cache lock poisoned");
        if cache.len() >= RESULT_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, result);
    }

    pub(crate) fn append_feedback(&self, line: &str) -> std::io::Result<()> {
        let _guard = self.feedback_lock.lock().expect("feedback lock poisoned");
        std::fs::create_dir_all(&self.config.data_dir)?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(feedback_path(&self.config.data_dir))?;
        writeln!(f, "{line}")
    }

    fn allow(&self, ip: IpAddr, now: Instant) -> bool {
        let Some(limit) = self.config.rate_limit_per_minute else { return true };
        let mut rate = self.rate.lock().expect("rate lock poisoned");
        let entry = rate.entry(ip).or_insert((now, 0));
        if now.duration_since(entry.0) >= Duration::from_secs(60) {
            *entry = (now, 0);
        }
        entry.1 += 1;
        entry.1 <= limit
    }
}

pub fn feedback_path(data_dir: &Path) -> std::path::PathBuf {
    data_dir.join("feedback.jsonl")
}

async fn rate_limit(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let ip = req.extensions().get::<ConnectInfo<SocketAddr>>().map(|c| c.0.ip());
    if let Some(ip) = ip {
        if !state.allow(ip, Instant::now()) {
            return ApiError::new(
                axum::http::StatusCode::TOO_MANY_REQUESTS,
                "rate_limited",
                "too many requests; try again in a minute",
            )
            .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    let body_limit = state
        .config
        .max_image_bytes
        .saturating_mul(state.config.max_images_per_upload + 1)
        .saturating_add(1 << 20);
    let api = Router::new()
        .route("/api/health", get(routes::health))
        .route("/api/uploads", post(routes::upload).layer(DefaultBodyLimit::max(body_limit)))
        .route("/api/sessions/{session_id}", get(routes::session))
        .route("/api/sessions/{session_id}/images/{image_id}", get(routes::image))
        .route(
            "/api/sessions/{session_id}/images/{image_id}/saliency/{failure_type_id}",
            get(routes::saliency),
        )
        .route("/api/diagnoses", post(routes::diagnose))
        .route("/api/failures", get(routes::failures))
        .route("/api/failures/{id}", get(routes::failure))
        .route("/api/failures/{id}/solutions", get(routes::solutions))
        .route("/api/glossary", get(routes::glossary))
        .route("/api/glossary/{term}", get(routes::glossary_term))
        .route("/api/feedback", post(routes::feedback))
        .route("/guide", get(routes::guide));
    let app = match &state.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(routes::not_found),
    };
    app.layer(middleware::from_fn_with_state(state.clone(), rate_limit))
        .with_state(state)
}

/// Binds the configured address and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.config.listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_on(listener, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(
        listener,
        router(state).into_make_service_with_connect_info::<SocketAddr>(),
    )
    .await
}
