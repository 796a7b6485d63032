//! HTTP API: image upload, target-mask composition and editing, and
//! asynchronous transfer jobs.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/api/images` | PNG body → `{image_id}` |
//! | GET | `/api/images/{id}` | stored PNG |
//! | GET | `/api/images/{id}/segmentation` | label PNG at generator resolution |
//! | GET | `/api/labels` | label table |
//! | POST | `/api/masks/compose` | `{refs}` → `{mask_id, png, provenance_png}` |
//! | GET | `/api/masks/{id}` | label PNG |
//! | GET | `/api/masks/{id}/provenance` | provenance PNG |
//! | PUT | `/api/masks/{id}` | edited label PNG → `{mask_id}` |
//! | POST | `/api/jobs` | job request → `{job_id}` |
//! | GET | `/api/jobs/{id}` | job status |
//! | GET | `/api/results/{id}.png` | result of a finished job |

mod jobs;
mod store;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use maskblend_core::align::segment_at_image_resolution;
use maskblend_core::backend::{Backend, BackendConfig};
use maskblend_core::masks::io::decode_label_png;
use maskblend_core::masks::{build_target_mask, task, LabelGrid, LabelTable, RegionSpec, SemanticMask, TargetMask, UNCOVERED};
use maskblend_core::pipeline::{complete_target_mask, EmbeddingCache, JobRequest, LabelScheme};
use maskblend_core::{Error, Image};

pub use jobs::{Job, JobError, JobProgress, JobState};
pub use store::Store;

/// Environment variable naming the data directory.
pub const DATA_DIR_ENV: &str = "MASKBLEND_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub backend: BackendConfig,
    pub data_dir: PathBuf,
    pub workers: usize,
    pub max_upload_bytes: usize,
    /// Queued plus running jobs allowed before submissions get 409.
    pub max_active_jobs: usize,
    pub labels: LabelScheme,
    /// Names served by `/api/labels`; generic names when empty.
    pub label_names: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            data_dir: PathBuf::from("maskblend-data"),
            workers: 1,
            max_upload_bytes: 8 << 20,
            max_active_jobs: 8,
            labels: LabelScheme::default(),
            label_names: task::NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ServiceConfig {
    /// Reads a JSON config; relative paths are taken relative to its
    /// directory, and the data-directory env var overrides `data_dir`.
    pub fn from_file(path: impl AsRef<Path>) -> maskblend_core::Result<Self> {
        let path = path.as_ref();
        let mut cfg: ServiceConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.backend.resolve_relative(dir);
            if cfg.data_dir.is_relative() {
                cfg.data_dir = dir.join(&cfg.data_dir);
            }
        }
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(d) = std::env::var_os(DATA_DIR_ENV) {
            self.data_dir = PathBuf::from(d);
        }
    }
}

pub struct Shared {
    pub backend: Backend,
    pub store: Store,
    pub cache: EmbeddingCache,
    pub config: ServiceConfig,
    jobs: jobs::JobTable,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// Loads the backend, opens the store and starts the worker pool.
    pub fn new(config: ServiceConfig) -> maskblend_core::Result<Self> {
        let backend = config.backend.load()?;
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: ServiceConfig, backend: Backend) -> maskblend_core::Result<Self> {
        let store = Store::open(&config.data_dir)?;
        let cache = EmbeddingCache::on_disk(store.cache_dir())?;
        let shared = Arc::new(Shared {
            backend,
            store,
            cache,
            jobs: jobs::JobTable::new(),
            config,
        });
        jobs::start_workers(shared.clone(), shared.config.workers);
        Ok(Self(shared))
    }

    pub fn shared(&self) -> &Shared {
        &self.0
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.0.jobs.get(id)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    stage: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            stage: None,
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let stage = e.stage().map(str::to_string);
        let mut inner = &e;
        while let Error::Stage { source, .. } = inner {
            inner = source;
        }
        let status = match inner {
            Error::InvalidLabels { .. } | Error::Shape(_) | Error::Dimension { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Request(_) | Error::Config(_) | Error::BlockOutOfRange { .. } | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::Image(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
            stage,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "stage": self.stage });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// 415 unless the body is declared and shaped as a PNG.
fn require_png(headers: &HeaderMap, body: &[u8]) -> ApiResult<()> {
    let ct = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    if ct.split(';').next().map(str::trim) != Some("image/png") || !body.starts_with(PNG_SIGNATURE) {
        return Err(ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "expected an image/png body"));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct ImageCreated {
    pub image_id: String,
}

async fn upload_image(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<ImageCreated>> {
    require_png(&headers, &body)?;
    Image::decode_png(&body).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    let image_id = s.0.store.put_image(&body)?;
    Ok(Json(ImageCreated { image_id }))
}

async fn get_image(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let bytes = s.0.store.image_bytes(&id).ok_or_else(|| ApiError::not_found("image", &id))?;
    Ok(png_response(bytes))
}

fn segment_image(s: &Shared, id: &str) -> ApiResult<SemanticMask> {
    if !s.store.has_image(id) {
        return Err(ApiError::not_found("image", id));
    }
    let r = s.backend.generator.resolution();
    let img = s.store.load_image(id)?.resized(r, r);
    Ok(segment_at_image_resolution(s.backend.segmenter.as_ref(), &img)?)
}

async fn get_segmentation(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = s.0.clone();
    let png = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> { Ok(segment_image(&s, &id)?.to_png()?) })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(png_response(png))
}

fn label_table(s: &Shared) -> LabelTable {
    let n = s.backend.segmenter.num_classes();
    let mut t = if s.config.label_names.len() == n {
        LabelTable::from_names(&s.config.label_names)
    } else {
        LabelTable::generic(n)
    };
    t.uncovered = Some(UNCOVERED);
    t
}

async fn get_labels(State(s): State<AppState>) -> Json<LabelTable> {
    Json(label_table(&s.0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComposeRef {
    pub image_id: String,
    pub class_ids: Vec<u8>,
    /// Higher wins overlapping claims; defaults to the ref's position.
    #[serde(default)]
    pub priority: Option<i64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComposeMaskRequest {
    pub refs: Vec<ComposeRef>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskCreated {
    pub mask_id: String,
    /// Base64 label PNG.
    pub png: String,
    /// Base64 provenance PNG: reference index per pixel, 255 for inpainted.
    pub provenance_png: String,
    pub height: usize,
    pub width: usize,
}

fn compose_mask(s: &Shared, req: &ComposeMaskRequest) -> ApiResult<MaskCreated> {
    if req.refs.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "at least one ref is required"));
    }
    let masks = req
        .refs
        .iter()
        .map(|r| segment_image(s, &r.image_id))
        .collect::<ApiResult<Vec<_>>>()?;
    let specs: Vec<RegionSpec> = req
        .refs
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let mut spec = RegionSpec::new(k, r.class_ids.iter().copied());
            if let Some(p) = r.priority {
                spec.priority = p;
            }
            spec
        })
        .collect();
    let classes: Vec<BTreeSet<u8>> = specs.iter().map(|sp| sp.class_ids.clone()).collect();
    let built = build_target_mask(&masks, &specs)?;
    let mask = complete_target_mask(built, &masks, &classes, &s.config.labels)?;
    let mask_id = s.store.put_mask(&mask, None)?;
    let b64 = base64::engine::general_purpose::STANDARD;
    Ok(MaskCreated {
        mask_id,
        png: b64.encode(mask.labels_png()?),
        provenance_png: b64.encode(mask.provenance_png()?),
        height: mask.height(),
        width: mask.width(),
    })
}

async fn post_compose(State(s): State<AppState>, Json(req): Json<ComposeMaskRequest>) -> ApiResult<Json<MaskCreated>> {
    let s = s.0.clone();
    let out = tokio::task::spawn_blocking(move || compose_mask(&s, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

async fn get_mask(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (labels, _) = s.0.store.mask_pngs(&id).ok_or_else(|| ApiError::not_found("mask", &id))?;
    Ok(png_response(labels))
}

async fn get_mask_provenance(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (_, prov) = s.0.store.mask_pngs(&id).ok_or_else(|| ApiError::not_found("mask", &id))?;
    Ok(png_response(prov))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskVersion {
    pub mask_id: String,
}

async fn put_mask(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<MaskVersion>> {
    let s = &s.0;
    require_png(&headers, &body)?;
    let n = s.backend.segmenter.num_classes();
    if !s.store.has_mask(&id) {
        return Err(ApiError::not_found("mask", &id));
    }
    let parent = s.store.load_mask(&id, n)?;
    let (h, w, labels) = decode_label_png(&body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    if (h, w) != (parent.height(), parent.width()) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("edited mask is {h}x{w}, expected {}x{}", parent.height(), parent.width()),
        ));
    }
    let prov = store::edited_provenance(&parent, &labels);
    let edited = TargetMask::new(h, w, labels, prov, n)?;
    Ok(Json(MaskVersion {
        mask_id: s.store.put_mask(&edited, Some(&id))?,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
}

async fn post_job(State(s): State<AppState>, Json(req): Json<JobRequest<String>>) -> ApiResult<Json<JobCreated>> {
    let s = &s.0;
    let (images, masks) = req.references();
    if let Some(id) = images.into_iter().find(|i| !s.store.has_image(i)) {
        return Err(ApiError::not_found("image", id));
    }
    if let Some(id) = masks.into_iter().find(|m| !s.store.has_mask(m)) {
        return Err(ApiError::not_found("mask", id));
    }
    let job_id = s.jobs.submit(req, s.config.max_active_jobs).ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            format!("{} jobs already active", s.config.max_active_jobs),
        )
    })?;
    Ok(Json(JobCreated { job_id }))
}

async fn get_job(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Job>> {
    s.0.jobs.get(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

async fn get_result(State(s): State<AppState>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let id = file.strip_suffix(".png").unwrap_or(&file);
    let job = s.0.jobs.get(id).ok_or_else(|| ApiError::not_found("job", id))?;
    match (&job.state, &job.result) {
        (JobState::Done, Some(img)) => {
            let bytes = s.0.store.image_bytes(img).ok_or_else(|| ApiError::not_found("image", img))?;
            Ok(png_response(bytes))
        }
        (JobState::Failed, _) => {
            let err = job.error.unwrap_or(JobError {
                stage: None,
                message: "job failed".into(),
            });
            Err(ApiError {
                status: StatusCode::CONFLICT,
                message: err.message,
                stage: err.stage,
            })
        }
        _ => Err(ApiError::new(StatusCode::CONFLICT, format!("job {id} has not finished"))),
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.0.config.max_upload_bytes;
    Router::new()
        .route("/api/images", post(upload_image))
        .route("/api/images/{id}", get(get_image))
        .route("/api/images/{id}/segmentation", get(get_segmentation))
        .route("/api/labels", get(get_labels))
        .route("/api/masks/compose", post(post_compose))
        .route("/api/masks/{id}", get(get_mask).put(put_mask))
        .route("/api/masks/{id}/provenance", get(get_mask_provenance))
        .route("/api/jobs", post(post_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/results/{file}", get(get_result))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(config: ServiceConfig, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let state = AppState::new(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
