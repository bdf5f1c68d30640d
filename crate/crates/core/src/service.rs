//! HTTP/JSON front end over a frozen checkpoint.
//!
//! Endpoints: `GET /healthz`, `GET /api/v1/aus`, `POST /api/v1/animate`,
//! `POST /api/v1/interpolate`. Images travel as base64 PNG.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::aucode::{self, AuSchema, AuVector, PresetBook};
use crate::error::{Error, Result};
use crate::facedata::{FaceBox, ImageTensor};
use crate::inference::{self, EditOutput, EditRequest};
use crate::models::Model;
use crate::training::checkpoint::{self, Checkpoint};

pub const ENV_PREFIX: &str = "GANIM_";
pub const MAX_STEPS: usize = 64;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_inflight: usize,
    /// Requests allowed to wait for a slot; beyond this the answer is 429.
    pub queue_depth: usize,
    /// Largest accepted side for images edited through a face box.
    pub max_wild_side: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_inflight: 4,
            queue_depth: 16,
            max_wild_side: 1024,
        }
    }
}

/// A checkpoint ready to serve.
pub struct LoadedModel {
    pub model: Model<f32>,
    pub schema: AuSchema,
    /// SHA-256 of the checkpoint file.
    pub model_id: String,
    aus_doc: serde_json::Value,
}

impl LoadedModel {
    pub fn new(ck: Checkpoint, model_id: String) -> Self {
        let schema = ck.meta.schema;
        let book = PresetBook::default();
        let mut presets = BTreeMap::new();
        for name in book.names() {
            match book.preset(&name, &schema) {
                Ok(v) => {
                    presets.insert(name, v.values().to_vec());
                }
                Err(e) => log::info!("preset `{name}` not served: {e}"),
            }
        }
        let aus_doc = json!({
            "count": schema.len(),
            "names": schema.labels(),
            "presets": presets,
        });
        LoadedModel {
            model: ck.model,
            schema,
            model_id,
            aus_doc,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let id = checkpoint::file_digest(path)?;
        Ok(Self::new(checkpoint::load(path)?, id))
    }
}

enum Slot {
    Loading,
    Ready(Arc<LoadedModel>),
    Failed(String),
}

/// Shared server state. Cloning shares everything.
#[derive(Clone)]
pub struct AppState {
    slot: Arc<RwLock<Slot>>,
    permits: Arc<Semaphore>,
    pending: Arc<AtomicUsize>,
    cfg: Arc<ServiceConfig>,
}

impl AppState {
    /// State whose model is still loading; `/healthz` answers 503.
    pub fn loading(cfg: ServiceConfig) -> Self {
        AppState {
            slot: Arc::new(RwLock::new(Slot::Loading)),
            permits: Arc::new(Semaphore::new(cfg.max_inflight.max(1))),
            pending: Arc::new(AtomicUsize::new(0)),
            cfg: Arc::new(cfg),
        }
    }

    pub fn ready(model: LoadedModel, cfg: ServiceConfig) -> Self {
        let s = Self::loading(cfg);
        s.set_model(model);
        s
    }

    pub fn set_model(&self, model: LoadedModel) {
        *self.slot.write().expect("state lock") = Slot::Ready(Arc::new(model));
    }

    pub fn set_failed(&self, msg: String) {
        *self.slot.write().expect("state lock") = Slot::Failed(msg);
    }

    fn model(&self) -> std::result::Result<Arc<LoadedModel>, ApiError> {
        match &*self.slot.read().expect("state lock") {
            Slot::Ready(m) => Ok(m.clone()),
            Slot::Loading => Err(ApiError::unavailable("model is loading")),
            Slot::Failed(e) => Err(ApiError::unavailable(&format!("model failed to load: {e}"))),
        }
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn bad(field: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            field: Some(field),
            ..Self::new(StatusCode::BAD_REQUEST, message)
        }
    }

    fn unavailable(msg: &str) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, msg)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        log::error!("request {id} failed: {e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, format!("internal error (id {id})"))
    }

    /// Maps library errors raised while serving a request.
    fn from_edit(e: Error) -> Self {
        match e {
            Error::AuLength { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            Error::Invalid(_) | Error::Shape { .. } => Self::new(StatusCode::BAD_REQUEST, e.to_string()),
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
pub struct BoxJson {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnimateRequest {
    pub image: String,
    pub target_aus: Vec<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub source_aus: Option<Vec<f64>>,
    #[serde(default, rename = "box")]
    pub face_box: Option<BoxJson>,
    #[serde(default)]
    pub return_masks: bool,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct AnimateResponse {
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attention_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub color_mask: Option<String>,
    pub timing_ms: f64,
    pub model_id: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct InterpolateRequest {
    #[serde(flatten)]
    pub edit: AnimateRequest,
    pub steps: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct InterpolateResponse {
    pub frames: Vec<String>,
    pub timing_ms: f64,
    pub model_id: String,
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

fn aus_field(values: &[f64], schema: &AuSchema) -> std::result::Result<AuVector, ApiError> {
    aucode::validate(values, schema)
        .map(|v| v.vector)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

/// Decoded and validated edit inputs.
struct Prepared {
    image: ImageTensor,
    request: EditRequest,
}

fn prepare(req: &AnimateRequest, m: &LoadedModel, cfg: &ServiceConfig) -> std::result::Result<Prepared, ApiError> {
    let png = B64
        .decode(req.image.as_bytes())
        .map_err(|e| ApiError::bad("image", format!("image is not valid base64: {e}")))?;
    let image = ImageTensor::decode_png(&png).map_err(|e| ApiError::bad("image", format!("image is not a PNG: {e}")))?;
    if let Some(a) = req.alpha {
        if !(0.0..=1.0).contains(&a) {
            return Err(ApiError::bad("alpha", format!("alpha {a} outside [0, 1]")));
        }
    }
    let (h, w) = (image.height(), image.width());
    let size = m.model.image_size();
    let face_box = match req.face_box {
        Some(b) => {
            if h > cfg.max_wild_side || w > cfg.max_wild_side {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    format!("image {w}x{h} exceeds {0}x{0}", cfg.max_wild_side),
                ));
            }
            let fb = FaceBox::new(b.x, b.y, b.w, b.h);
            fb.check(&image).map_err(|e| ApiError::bad("box", e.to_string()))?;
            Some(fb)
        }
        None => {
            if h > size || w > size {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    format!("image {w}x{h} exceeds the model size {size}x{size}; send a box"),
                ));
            }
            if h != size || w != size {
                return Err(ApiError::bad("image", format!("image must be {size}x{size} without a box")));
            }
            None
        }
    };
    let mut request = EditRequest::new(aus_field(&req.target_aus, &m.schema)?);
    request.alpha = req.alpha;
    request.source = req.source_aus.as_deref().map(|s| aus_field(s, &m.schema)).transpose()?;
    request.dump_masks = req.return_masks;
    request.face_box = face_box;
    Ok(Prepared { image, request })
}

fn b64_png(img: &ImageTensor) -> std::result::Result<String, ApiError> {
    Ok(B64.encode(img.encode_png().map_err(ApiError::internal)?))
}

fn animate_response(out: &EditOutput, model_id: &str, t0: Instant) -> std::result::Result<AnimateResponse, ApiError> {
    let (attention_mask, color_mask) = match &out.masks {
        Some(m) => (
            Some(B64.encode(m.attention_png().map_err(ApiError::internal)?)),
            Some(b64_png(&m.color)?),
        ),
        None => (None, None),
    };
    Ok(AnimateResponse {
        image: b64_png(&out.image)?,
        attention_mask,
        color_mask,
        timing_ms: t0.elapsed().as_secs_f64() * 1e3,
        model_id: model_id.to_string(),
    })
}

/// Runs `work` on the blocking pool once a slot is free.
async fn limited<T: Send + 'static>(
    state: &AppState,
    work: impl FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    let cap = state.cfg.max_inflight.max(1) + state.cfg.queue_depth;
    if state.pending.fetch_add(1, Ordering::SeqCst) >= cap {
        state.pending.fetch_sub(1, Ordering::SeqCst);
        return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "server busy, retry later"));
    }
    struct Pending(Arc<AtomicUsize>);
    impl Drop for Pending {
        fn drop(&mut self) {
            self.0.fetch_sub(1, Ordering::SeqCst);
        }
    }
    let _pending = Pending(state.pending.clone());
    let _permit = state.permits.acquire().await.map_err(ApiError::internal)?;
    tokio::task::spawn_blocking(work).await.map_err(ApiError::internal)?
}

async fn healthz(State(state): State<AppState>) -> Response {
    match state.model() {
        Ok(m) => (StatusCode::OK, Json(json!({"status": "ok", "model_id": m.model_id}))).into_response(),
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading", "detail": e.message}))).into_response(),
    }
}

async fn aus(State(state): State<AppState>) -> std::result::Result<Response, ApiError> {
    let m = state.model()?;
    Ok(Json(m.aus_doc.clone()).into_response())
}

async fn animate(State(state): State<AppState>, body: Bytes) -> std::result::Result<Json<AnimateResponse>, ApiError> {
    let m = state.model()?;
    let req: AnimateRequest = parse_json(&body)?;
    let cfg = state.cfg.clone();
    let t0 = Instant::now();
    let resp = limited(&state, move || {
        let p = prepare(&req, &m, &cfg)?;
        let out = inference::edit(&m.model, &p.image, &p.request).map_err(ApiError::from_edit)?;
        animate_response(&out, &m.model_id, t0)
    })
    .await?;
    Ok(Json(resp))
}

async fn interpolate(
    State(state): State<AppState>,
    body: Bytes,
) -> std::result::Result<Json<InterpolateResponse>, ApiError> {
    let m = state.model()?;
    let req: InterpolateRequest = parse_json(&body)?;
    if !(2..=MAX_STEPS).contains(&req.steps) {
        return Err(ApiError {
            field: Some("steps"),
            ..ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("steps must be in 2..={MAX_STEPS}, got {}", req.steps),
            )
        });
    }
    let cfg = state.cfg.clone();
    let t0 = Instant::now();
    let resp = limited(&state, move || {
        let mut p = prepare(&req.edit, &m, &cfg)?;
        p.request.dump_masks = false;
        let frames = inference::interpolate_request(&m.model, &p.image, &p.request, req.steps)
            .map_err(ApiError::from_edit)?
            .iter()
            .map(|o| b64_png(&o.image))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(InterpolateResponse {
            frames,
            timing_ms: t0.elapsed().as_secs_f64() * 1e3,
            model_id: m.model_id.clone(),
        })
    })
    .await?;
    Ok(Json(resp))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/v1/aus", get(aus))
        .route("/api/v1/animate", post(animate))
        .route("/api/v1/interpolate", post(interpolate))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

/// Binds `addr`, loads `model` in the background and serves until the
/// process ends. Health answers 503 until loading completes.
pub async fn serve(model: PathBuf, addr: SocketAddr, cfg: ServiceConfig) -> Result<()> {
    let state = AppState::loading(cfg);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match LoadedModel::load(&model) {
        Ok(m) => {
            log::info!("serving {} (model_id {})", model.display(), m.model_id);
            loader.set_model(m);
        }
        Err(e) => {
            log::error!("cannot load {}: {e}", model.display());
            loader.set_failed(e.to_string());
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
