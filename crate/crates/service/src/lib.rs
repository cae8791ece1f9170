//! HTTP inference service.
//!
//! Checkpoints are loaded once at startup and shared read-only between
//! requests. Inference runs on the blocking pool behind a semaphore so a
//! burst of large images cannot starve the async runtime.
//!
//! | route | method | body |
//! |---|---|---|
//! | `/healthz` | GET | `200` once models are loaded, `503` before |
//! | `/v1/models` | GET | `[{model_id, backbone, conditioning, trained_epochs}]` |
//! | `/v1/enhance` | POST | [`EnhanceRequest`] → [`EnhanceResponse`] |
//! | `/v1/mask/derive` | POST | [`DeriveRequest`] → [`DeriveResponse`] |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ranlen::backbones::{Backbone, Conditioning, Model};
use ranlen::checkpoint::Checkpoint;
use ranlen::masks::{self, BandMode, CircleSpec, RegionMask};
use ranlen::nn::ParamStore;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Request bodies above this size are rejected with 413.
pub const MAX_BODY_BYTES: usize = 16 << 20;
pub const CHECKPOINT_EXTENSION: &str = "ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub backbone: Backbone,
    pub conditioning: Conditioning,
    pub trained_epochs: usize,
}

pub struct LoadedModel {
    pub info: ModelInfo,
    model: Model,
    params: ParamStore<f32>,
}

impl LoadedModel {
    pub fn from_checkpoint(model_id: impl Into<String>, ck: Checkpoint) -> ranlen::Result<Self> {
        let model = ck.model()?;
        Ok(Self {
            info: ModelInfo {
                model_id: model_id.into(),
                backbone: ck.model.backbone,
                conditioning: ck.model.conditioning,
                trained_epochs: ck.epoch,
            },
            model,
            params: ck.params,
        })
    }

    pub fn enhance(&self, image: &image::RgbImage, mask: &RegionMask, degree: f64) -> ranlen::Result<image::RgbImage> {
        ranlen::enhance_rgb(&self.model, &self.params, image, mask, degree)
    }
}

/// Models keyed by id (the checkpoint's file stem).
#[derive(Default)]
pub struct Registry {
    models: BTreeMap<String, LoadedModel>,
}

impl Registry {
    pub fn insert(&mut self, model: LoadedModel) {
        self.models.insert(model.info.model_id.clone(), model);
    }

    pub fn get(&self, id: &str) -> Option<&LoadedModel> {
        self.models.get(id)
    }

    /// The model used when a request names none: the first id in order.
    pub fn default_model(&self) -> Option<&LoadedModel> {
        self.models.values().next()
    }

    pub fn infos(&self) -> Vec<ModelInfo> {
        self.models.values().map(|m| m.info.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Load checkpoint files and every `*.ckpt` inside directories.
    /// Unreadable checkpoints are skipped with a warning; a missing path
    /// is an error.
    pub fn load(paths: &[PathBuf]) -> ranlen::Result<Self> {
        let mut files = Vec::new();
        for p in paths {
            if p.is_dir() {
                let entries = std::fs::read_dir(p).map_err(|e| ranlen::Error::File {
                    path: p.clone(),
                    source: e,
                })?;
                let mut found: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.is_file() && f.extension().is_some_and(|x| x == CHECKPOINT_EXTENSION))
                    .collect();
                found.sort();
                files.extend(found);
            } else if p.is_file() {
                files.push(p.clone());
            } else {
                return Err(ranlen::Error::Data(format!("{} does not exist", p.display())));
            }
        }
        let mut reg = Self::default();
        for f in files {
            match Checkpoint::load(&f).and_then(|ck| LoadedModel::from_checkpoint(model_id(&f), ck)) {
                Ok(m) => {
                    tracing::info!(model_id = %m.info.model_id, "loaded model");
                    reg.insert(m);
                }
                Err(e) => tracing::warn!(file = %f.display(), error = %e, "skipping checkpoint"),
            }
        }
        Ok(reg)
    }
}

fn model_id(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Shared state. The registry is empty until loading finishes, which is
/// what `/healthz` reports.
pub struct AppState {
    registry: OnceLock<Arc<Registry>>,
    permits: Semaphore,
}

impl AppState {
    /// State whose models are still loading.
    pub fn loading(workers: usize) -> Arc<Self> {
        Arc::new(Self {
            registry: OnceLock::new(),
            permits: Semaphore::new(workers.max(1)),
        })
    }

    pub fn ready(registry: Registry, workers: usize) -> Arc<Self> {
        let state = Self::loading(workers);
        state.finish_loading(registry);
        state
    }

    /// Publish the loaded models. Later calls are ignored.
    pub fn finish_loading(&self, registry: Registry) {
        let _ = self.registry.set(Arc::new(registry));
    }

    pub fn is_ready(&self) -> bool {
        self.registry.get().is_some()
    }

    fn registry(&self) -> Result<Arc<Registry>, ApiError> {
        self.registry
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "models are still loading"))
    }
}

/// Load `paths` on the blocking pool and publish them into `state`.
pub fn spawn_load(state: Arc<AppState>, paths: Vec<PathBuf>) -> tokio::task::JoinHandle<ranlen::Result<()>> {
    tokio::task::spawn_blocking(move || {
        let reg = Registry::load(&paths)?;
        if reg.is_empty() {
            tracing::warn!("no usable checkpoints found");
        }
        state.finish_loading(reg);
        Ok(())
    })
}

#[derive(Clone, Debug, Default)]
pub struct ServeOptions {
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
}

pub fn router(state: Arc<AppState>, opts: &ServeOptions) -> Router {
    let origin = match &opts.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                tracing::warn!(origin = %o, "invalid CORS origin, allowing any");
                AllowOrigin::any()
            }
        },
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/models", get(list_models))
        .route("/v1/enhance", post(enhance))
        .route("/v1/mask/derive", post(derive_mask))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<ranlen::Error> for ApiError {
    fn from(e: ranlen::Error) -> Self {
        use ranlen::Error as E;
        let status = match e {
            E::InvalidArgument(_)
            | E::InvalidMask(_)
            | E::Containment { .. }
            | E::Shape(_)
            | E::Image(_)
            | E::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        let status = match e {
            JsonRejection::BytesRejection(_) => e.status(),
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "status": self.status.as_u16() });
        (self.status, Json(body)).into_response()
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    if state.is_ready() {
        (StatusCode::OK, Json(serde_json::json!({ "status": "ok" }))).into_response()
    } else {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "models are still loading").into_response()
    }
}

async fn list_models(State(state): State<Arc<AppState>>) -> Result<Json<Vec<ModelInfo>>, ApiError> {
    Ok(Json(state.registry()?.infos()))
}

fn default_degree() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhanceRequest {
    /// Base64 PNG or JPEG.
    pub image: String,
    /// Base64 two-channel mask PNG (R = area A, G = A ∪ B).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circle: Option<CircleSpec>,
    #[serde(default = "default_degree")]
    pub degree: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceResponse {
    /// Base64 PNG, same size as the input.
    pub image: String,
    pub r_a: f64,
    pub r_b: f64,
    pub timing_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveRequest {
    /// Base64 single-channel map; luminance ≥ 128 is set.
    pub mask_a: String,
    pub mode: BandMode,
    pub radius_px: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeriveResponse {
    /// Base64 two-channel mask PNG.
    pub mask: String,
    pub r_a: f64,
    pub r_b: f64,
}

/// Decode base64, tolerating a `data:...;base64,` prefix.
fn decode_b64(field: &str, s: &str) -> Result<Vec<u8>, ApiError> {
    let payload = match s.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => s,
    };
    STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))
}

fn resolve_mask(req: &EnhanceRequest, height: usize, width: usize) -> Result<RegionMask, ApiError> {
    match (&req.mask, &req.circle) {
        (Some(_), Some(_)) | (None, None) => Err(ApiError::bad_request("give exactly one of mask or circle")),
        (Some(m), None) => {
            let mask = masks::decode_mask_png(&decode_b64("mask", m)?)?;
            if (mask.height(), mask.width()) != (height, width) {
                return Err(ApiError::bad_request(format!(
                    "mask is {}×{} but the image is {height}×{width}",
                    mask.height(),
                    mask.width()
                )));
            }
            Ok(mask)
        }
        (None, Some(c)) => {
            let c = CircleSpec::new(c.center_x, c.center_y, c.r1, c.r2)?;
            if !c.center_within(height, width) {
                return Err(ApiError::bad_request(format!(
                    "circle center ({}, {}) lies outside the {height}×{width} image",
                    c.center_x, c.center_y
                )));
            }
            Ok(c.rasterize(height, width))
        }
    }
}

async fn enhance(
    State(state): State<Arc<AppState>>,
    body: Result<Json<EnhanceRequest>, JsonRejection>,
) -> Result<Json<EnhanceResponse>, ApiError> {
    let Json(req) = body?;
    if !(req.degree > 0.0 && req.degree.is_finite()) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("degree must be positive, got {}", req.degree),
        ));
    }
    let registry = state.registry()?;
    let found = match &req.model_id {
        Some(id) => registry.get(id).is_some(),
        None => registry.default_model().is_some(),
    };
    if !found {
        let msg = match &req.model_id {
            Some(id) => format!("unknown model_id '{id}'"),
            None => "no models are loaded".to_string(),
        };
        return Err(ApiError::new(StatusCode::NOT_FOUND, msg));
    }
    let _permit = state
        .permits
        .acquire()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting down"))?;
    let started = Instant::now();
    let (png, partition) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let model = match &req.model_id {
            Some(id) => registry.get(id),
            None => registry.default_model(),
        }
        .expect("checked above");
        let img = ranlen::data::decode_image(&decode_b64("image", &req.image)?)
            .map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
        let mask = resolve_mask(&req, img.height() as usize, img.width() as usize)?;
        let out = model.enhance(&img, &mask, req.degree)?;
        Ok((ranlen::data::encode_png(&out)?, mask.partition()))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(EnhanceResponse {
        image: STANDARD.encode(png),
        r_a: partition.r_a,
        r_b: partition.r_b,
        timing_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}

async fn derive_mask(body: Result<Json<DeriveRequest>, JsonRejection>) -> Result<Json<DeriveResponse>, ApiError> {
    let Json(req) = body?;
    if req.radius_px < 1 {
        return Err(ApiError::bad_request(format!(
            "radius_px must be at least 1, got {}",
            req.radius_px
        )));
    }
    let map = masks::decode_binary_map(&decode_b64("mask_a", &req.mask_a)?)?;
    let derived = masks::derive_band(&map, req.mode, req.radius_px as usize)?;
    if derived.empty_inner {
        let why = match req.mode {
            BandMode::DilateOut => "the input mask has no set pixels, so area A is empty".to_string(),
            BandMode::ErodeIn => derived.warning().unwrap_or_default(),
        };
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, why));
    }
    let p = derived.mask.partition();
    Ok(Json(DeriveResponse {
        mask: STANDARD.encode(masks::encode_mask_png(&derived.mask)?),
        r_a: p.r_a,
        r_b: p.r_b,
    }))
}
