//! HTTP facade over a trained model pair: clip intake, line generation and
//! favorites, persisted in SQLite plus filesystem blobs.

pub mod error;
pub mod models;
pub mod store;

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use lyricmuse_core::{audio, tensor_io};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use error::{Result, ServiceError};
pub use models::{ModelBundle, ModelVersions, ProcessedClip};
pub use store::{ClipRecord, FavoriteRecord, Store};

pub const DATA_DIR_ENV: &str = "LYRICMUSE_DATA_DIR";
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;
pub const MAX_LINES: usize = 500;
/// Server-chosen seeds stay below 2^53 so browsers round-trip them exactly.
pub const MAX_SERVER_SEED: u64 = 1 << 53;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub max_upload_bytes: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            static_dir: None,
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub models: Option<Arc<ModelBundle>>,
    pub store: Arc<Store>,
    pub max_upload_bytes: usize,
}

impl AppState {
    pub fn new(config: &ServiceConfig, models: Option<ModelBundle>) -> Result<Self> {
        Ok(Self {
            models: models.map(Arc::new),
            store: Arc::new(Store::open(&config.data_dir)?),
            max_upload_bytes: config.max_upload_bytes,
        })
    }

    fn models(&self) -> Result<Arc<ModelBundle>> {
        self.models.clone().ok_or(ServiceError::ModelsUnavailable)
    }
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let limit = state.max_upload_bytes;
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/clips", post(upload_clip).get(list_clips))
        .route("/api/generate", post(generate))
        .route("/api/favorites", post(add_favorite).get(list_favorites))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub fn build_app(config: &ServiceConfig, models: Option<ModelBundle>) -> Result<Router> {
    let state = AppState::new(config, models)?;
    Ok(router(state, config.static_dir.clone()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub models: Option<ModelVersions>,
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    let (status, models) = match &state.models {
        Some(m) => ("ok", Some(m.versions.clone())),
        None => ("degraded", None),
    };
    Json(HealthResponse { status: status.into(), models })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    /// First clip of the upload.
    pub clip_id: String,
    pub duration: f64,
    pub peak_db: f64,
    /// Every clip cut from the upload, in time order.
    pub clips: Vec<ClipRecord>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn multipart_error(e: axum::extract::multipart::MultipartError, limit: usize) -> ServiceError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ServiceError::TooLarge(limit)
    } else {
        ServiceError::BadRequest(e.body_text())
    }
}

async fn upload_clip(State(state): State<AppState>, mut multipart: Multipart) -> Result<Json<UploadResponse>> {
    let models = state.models()?;
    let limit = state.max_upload_bytes;
    let mut upload = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| multipart_error(e, limit))? {
        let is_file = field.file_name().is_some() || field.name() == Some("file");
        if !is_file {
            continue;
        }
        let filename = field.file_name().unwrap_or("upload.wav").to_string();
        let bytes = field.bytes().await.map_err(|e| multipart_error(e, limit))?;
        upload = Some((filename, bytes));
        break;
    }
    let (filename, bytes) = upload.ok_or_else(|| ServiceError::BadRequest("no file field in upload".into()))?;

    let store = state.store.clone();
    let records = tokio::task::spawn_blocking(move || -> Result<Vec<ClipRecord>> {
        let clips = models.process_upload(&bytes, &filename)?;
        clips.iter().map(|c| persist_clip(&store, &filename, c)).collect()
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;

    let first = &records[0];
    Ok(Json(UploadResponse {
        clip_id: first.clip_id.clone(),
        duration: first.duration,
        peak_db: first.peak_db,
        clips: records,
    }))
}

fn persist_clip(store: &Store, filename: &str, clip: &ProcessedClip) -> Result<ClipRecord> {
    let clip_id = uuid::Uuid::new_v4().to_string();
    let wav = audio::encode_wav(&clip.samples, clip.sample_rate)?;
    store.write_blob(&format!("audio/{clip_id}.wav"), &wav)?;
    store.write_blob(
        &format!("spectrograms/{clip_id}.mspc"),
        &tensor_io::encode(&clip.spectrogram),
    )?;
    let embedding_ref = format!("embeddings/{clip_id}.json");
    let json = serde_json::to_vec(&clip.embedding).map_err(|e| ServiceError::Internal(e.to_string()))?;
    store.write_blob(&embedding_ref, &json)?;
    let record = ClipRecord {
        clip_id,
        filename: filename.to_string(),
        duration: clip.duration,
        peak_db: clip.peak_db,
        embedding_ref,
        created_at: now(),
    };
    store.insert_clip(&record)?;
    Ok(record)
}

async fn list_clips(State(state): State<AppState>) -> Result<Json<Vec<ClipRecord>>> {
    Ok(Json(state.store.list_clips()?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateBody {
    pub clip_id: String,
    pub n_lines: i64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub clip_id: String,
    pub lines: Vec<String>,
    pub seed: u64,
}

async fn generate(
    State(state): State<AppState>,
    body: std::result::Result<Json<GenerateBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<GenerateResponse>> {
    let Json(body) = body.map_err(|e| ServiceError::Unprocessable(e.body_text()))?;
    if body.n_lines < 1 || body.n_lines > MAX_LINES as i64 {
        return Err(ServiceError::Unprocessable(format!(
            "n_lines must be in 1..={MAX_LINES}, got {}",
            body.n_lines
        )));
    }
    if !(body.temperature.is_finite() && body.temperature >= 0.0) {
        return Err(ServiceError::Unprocessable("temperature must be finite and non-negative".into()));
    }
    let clip = state
        .store
        .get_clip(&body.clip_id)?
        .ok_or_else(|| ServiceError::NotFound(format!("clip {}", body.clip_id)))?;
    let models = state.models()?;
    let embedding = state.store.load_embedding(&clip)?;
    let seed = body.seed.unwrap_or_else(|| rand::rng().random_range(0..MAX_SERVER_SEED));
    let n_lines = body.n_lines as usize;
    let temperature = body.temperature;
    let lines = tokio::task::spawn_blocking(move || models.generate(embedding, n_lines, temperature, seed))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(GenerateResponse { clip_id: clip.clip_id, lines, seed }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FavoriteBody {
    pub clip_id: String,
    pub line: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FavoriteResponse {
    pub favorite_id: String,
}

async fn add_favorite(
    State(state): State<AppState>,
    body: std::result::Result<Json<FavoriteBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<FavoriteResponse>> {
    let Json(body) = body.map_err(|e| ServiceError::Unprocessable(e.body_text()))?;
    if state.store.get_clip(&body.clip_id)?.is_none() {
        return Err(ServiceError::NotFound(format!("clip {}", body.clip_id)));
    }
    let record = FavoriteRecord {
        favorite_id: uuid::Uuid::new_v4().to_string(),
        clip_id: body.clip_id,
        line: body.line,
        created_at: now(),
    };
    state.store.insert_favorite(&record)?;
    Ok(Json(FavoriteResponse { favorite_id: record.favorite_id }))
}

async fn list_favorites(State(state): State<AppState>) -> Result<Json<Vec<FavoriteRecord>>> {
    Ok(Json(state.store.list_favorites()?))
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(config: &ServiceConfig, models: Option<ModelBundle>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let app = build_app(config, models).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
