use std::path::Path;
use std::sync::Arc;

use chrono::{Duration, Utc};
use printfix_core::curator::KnowledgeBase;
use printfix_core::diagnosis::model::Architecture;
use printfix_core::diagnosis::{DiagnosisEngine, ModelBundle, TrainConfig};
use printfix_service::sessions::{SessionStore, ValidatedImage};
use printfix_service::{AppState, ServiceConfig};
use serde_json::{json, Value};

fn kb() -> KnowledgeBase {
    KnowledgeBase::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../kb")).unwrap()
}

fn engine() -> DiagnosisEngine {
    let cfg = TrainConfig {
        architecture: Architecture::ResnetMini,
        input_size: 32,
        ..TrainConfig::default()
    };
    DiagnosisEngine::new(vec![
        ModelBundle::untrained("stringing", cfg.clone(), 4.0).unwrap(),
        ModelBundle::untrained("warping", cfg, -4.0).unwrap(),
    ])
    .unwrap()
}

fn png(w: u32, h: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 5) as u8, 90]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

async fn start(config: ServiceConfig, engine: Option<DiagnosisEngine>) -> String {
    let state = Arc::new(AppState::new(config, kb(), engine).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(printfix_service::serve_on(listener, state));
    base
}

fn config(data: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: data.to_path_buf(),
        ..ServiceConfig::default()
    }
}

async fn upload(base: &str, bytes: Vec<u8>) -> Value {
    let form = reqwest::multipart::Form::new().part("images", reqwest::multipart::Part::bytes(bytes).file_name("p.png"));
    let r = reqwest::Client::new()
        .post(format!("{base}/api/uploads"))
        .multipart(form)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 201);
    r.json().await.unwrap()
}

async fn diagnose(base: &str, body: Value) -> (u16, Value) {
    let r = reqwest::Client::new()
        .post(format!("{base}/api/diagnoses"))
        .json(&body)
        .send()
        .await
        .unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

#[tokio::test]
async fn health_guide_and_unknown_routes() {
    let data = tempfile::tempdir().unwrap();
    let base = start(config(data.path()), Some(engine())).await;
    let h: Value = reqwest::get(format!("{base}/api/health")).await.unwrap().json().await.unwrap();
    assert_eq!(h["models"], json!(["stringing", "warping"]));
    let g = reqwest::get(format!("{base}/guide")).await.unwrap();
    assert_eq!(g.status(), 200);
    assert!(g.text().await.unwrap().contains("<html"));
    let r = reqwest::get(format!("{base}/api/nope")).await.unwrap();
    assert_eq!(r.status(), 404);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"]["code"], "route_not_found");
}

#[tokio::test]
async fn best_guess_and_debug_probabilities() {
    let data = tempfile::tempdir().unwrap();
    let base = start(config(data.path()), Some(engine())).await;
    let sid = upload(&base, png(40, 30)).await["session_id"].as_str().unwrap().to_string();

    let (s, all) = diagnose(&base, json!({"session_id": sid, "image_id": "img1"})).await;
    assert_eq!(s, 200);
    assert_eq!(all["mode"], "all");
    assert_eq!(all["entries"].as_array().unwrap().len(), 2);
    assert!(all["entries"][0].get("probability").is_none());
    assert_eq!(all["entries"][0]["bin_label"], "Highly Likely");
    assert_eq!(all["entries"][1]["bin_label"], "Highly Unlikely");

    let (_, best) = diagnose(&base, json!({"session_id": sid, "image_id": "img1", "mode": "best_guess", "debug": true})).await;
    assert_eq!(best["status"], "ok");
    let entries = best["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["failure_type_id"], "stringing");
    assert!(entries[0]["probability"].as_f64().unwrap() > 0.75);
}

#[tokio::test]
async fn no_confident_match() {
    let cfg = TrainConfig {
        architecture: Architecture::ResnetMini,
        input_size: 32,
        ..TrainConfig::default()
    };
    let engine = DiagnosisEngine::new(vec![ModelBundle::untrained("warping", cfg, -4.0).unwrap()]).unwrap();
    let data = tempfile::tempdir().unwrap();
    let base = start(config(data.path()), Some(engine)).await;
    let sid = upload(&base, png(16, 16)).await["session_id"].as_str().unwrap().to_string();
    let (s, best) = diagnose(&base, json!({"session_id": sid, "image_id": "img1", "mode": "best_guess"})).await;
    assert_eq!(s, 200);
    assert_eq!(best["status"], "no_confident_match");
    assert_eq!(best["entries"], json!([]));
}

#[tokio::test]
async fn debug_probabilities_from_config() {
    let data = tempfile::tempdir().unwrap();
    let base = start(
        ServiceConfig {
            debug_probabilities: true,
            ..config(data.path())
        },
        Some(engine()),
    )
    .await;
    let sid = upload(&base, png(16, 16)).await["session_id"].as_str().unwrap().to_string();
    let (_, all) = diagnose(&base, json!({"session_id": sid, "image_id": "img1"})).await;
    assert!(all["entries"].as_array().unwrap().iter().all(|e| e["probability"].is_number()));
}

#[tokio::test]
async fn no_models_is_503() {
    let data = tempfile::tempdir().unwrap();
    let base = start(config(data.path()), None).await;
    let sid = upload(&base, png(16, 16)).await["session_id"].as_str().unwrap().to_string();
    let (s, body) = diagnose(&base, json!({"session_id": sid, "image_id": "img1"})).await;
    assert_eq!(s, 503);
    assert_eq!(body["error"]["code"], "no_models");
    let failures: Value = reqwest::get(format!("{base}/api/failures")).await.unwrap().json().await.unwrap();
    assert!(failures["failure_types"].as_array().unwrap().iter().all(|f| f["has_model"] == false));
}

#[tokio::test]
async fn expired_session() {
    let data = tempfile::tempdir().unwrap();
    let base = start(config(data.path()), Some(engine())).await;
    let store = SessionStore::open(data.path(), 24).unwrap();
    let old = store
        .create(
            vec![ValidatedImage {
                filename: "old.png".into(),
                bytes: png(8, 8),
                format: image::ImageFormat::Png,
                width: 8,
                height: 8,
            }],
            Utc::now() - Duration::hours(48),
        )
        .unwrap();
    let r = reqwest::get(format!("{base}/api/sessions/{}", old.session_id)).await.unwrap();
    assert_eq!(r.status(), 404);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"]["code"], "session_expired");
    let (s, body) = diagnose(&base, json!({"session_id": old.session_id, "image_id": "img1"})).await;
    assert_eq!(s, 404);
    assert_eq!(body["error"]["code"], "session_expired");
}

#[tokio::test]
async fn failure_description_and_solutions() {
    let data = tempfile::tempdir().unwrap();
    let base = start(config(data.path()), Some(engine())).await;
    let d: Value = reqwest::get(format!("{base}/api/failures/stringing")).await.unwrap().json().await.unwrap();
    assert_eq!(d["has_model"], true);
    assert!(!d["visual_features"].as_array().unwrap().is_empty());

    let url = format!("{base}/api/failures/under_extrusion/solutions?clue=popping_noise&sort=difficulty_desc");
    let s: Value = reqwest::get(url).await.unwrap().json().await.unwrap();
    let cards = s["cards"].as_array().unwrap();
    assert!(cards.iter().any(|c| c["card_id"] == "ue_wet_filament"));

    let r = reqwest::get(format!("{base}/api/failures/under_extrusion/solutions?clue=no_such_clue")).await.unwrap();
    assert_eq!(r.status(), 400);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"]["code"], "unknown_clue");

    let r = reqwest::get(format!("{base}/api/failures/under_extrusion/solutions?difficulty=Expert")).await.unwrap();
    assert_eq!(r.status(), 400);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"]["allowed"], json!(["Basic", "Intermediate", "Advanced"]));
}

#[tokio::test]
async fn glossary_lookup_is_normalized() {
    let data = tempfile::tempdir().unwrap();
    let base = start(config(data.path()), None).await;
    let all: Value = reqwest::get(format!("{base}/api/glossary")).await.unwrap().json().await.unwrap();
    assert!(all["terms"].as_array().unwrap().len() >= 20);
    for term in ["z%20seam", "Z-Seam", "z_seam"] {
        let r = reqwest::get(format!("{base}/api/glossary/{term}")).await.unwrap();
        assert_eq!(r.status(), 200, "{term}");
    }
}

#[tokio::test]
async fn rate_limit() {
    let data = tempfile::tempdir().unwrap();
    let base = start(
        ServiceConfig {
            rate_limit_per_minute: Some(3),
            ..config(data.path())
        },
        None,
    )
    .await;
    let mut codes = Vec::new();
    for _ in 0..5 {
        codes.push(reqwest::get(format!("{base}/api/health")).await.unwrap().status().as_u16());
    }
    assert_eq!(codes, [200, 200, 200, 429, 429]);
}

#[test]
fn shipped_service_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/service.toml");
    let cfg = ServiceConfig::load(Some(&path)).unwrap();
    assert!(cfg.kb_dir.ends_with("kb"));
    assert!(cfg.kb_dir.is_absolute() || cfg.kb_dir.starts_with(path.parent().unwrap()));
    KnowledgeBase::load(&cfg.kb_dir).unwrap();
}
