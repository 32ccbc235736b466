//! HTTP API over a loaded model artifact.
//!
//! Routes (all JSON unless noted):
//!
//! - `POST /api/v1/classify`: multipart `image`, returns a classification result
//! - `POST /api/v1/boundary?strip_width=&axis=&distal=&threshold=`: multipart `image`
//! - `POST /api/v1/saliency?opacity=`: multipart `image`, returns a PNG overlay
//! - `GET  /api/v1/model`: descriptor summary
//! - `POST /api/v1/model/reload`: re-reads the model directory and swaps the artifact
//! - `GET  /healthz`: `ok` once a model is loaded
//!
//! Inference runs on the blocking pool against an `Arc` of the current
//! artifact, so a reload never affects a request already in flight.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::multipart::{Multipart, MultipartRejection};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fa_core::boundary::{analyze, BoundaryError, BoundaryEstimate, BoundaryOptions, StripClassification};
use fa_core::classifier::{
    ClassificationResult, ClassifierError, ModelArtifact, Preprocessing, TrainingSummary,
};
use fa_core::imaging::{decode_image, encode_png};
use fa_core::saliency::{compute_saliency, render_overlay};
use fa_core::{Axis, DistalDirection, Label};
use image::{ImageFormat, RgbImage};
use serde::Serialize;
use tokio::net::TcpListener;

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 20 * 1024 * 1024;
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_OPACITY: f64 = 0.5;
/// Multipart field carrying the image.
pub const IMAGE_FIELD: &str = "image";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub model_dir: PathBuf,
    pub max_upload_bytes: usize,
    pub request_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(model_dir: impl Into<PathBuf>) -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            model_dir: model_dir.into(),
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_upload_bytes == 0 {
            return Err("max upload size must be positive".into());
        }
        if self.request_timeout.is_zero() {
            return Err("request timeout must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum ModelState {
    Loading,
    Ready(Arc<ModelArtifact>),
    Unavailable(String),
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Shared>,
}

struct Shared {
    config: ServiceConfig,
    model: RwLock<ModelState>,
}

impl AppState {
    /// State with no model yet; call [`AppState::load_blocking`] to load one.
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            inner: Arc::new(Shared {
                config,
                model: RwLock::new(ModelState::Loading),
            }),
        }
    }

    pub fn with_model(config: ServiceConfig, artifact: ModelArtifact) -> Self {
        let state = Self::new(config);
        state.set(ModelState::Ready(Arc::new(artifact)));
        state
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn model_state(&self) -> ModelState {
        self.inner.model.read().expect("model lock poisoned").clone()
    }

    fn set(&self, state: ModelState) {
        *self.inner.model.write().expect("model lock poisoned") = state;
    }

    /// Loads the artifact from the configured directory and swaps it in.
    /// On failure a previously loaded model stays in service.
    pub fn load_blocking(&self) -> Result<Arc<ModelArtifact>, ClassifierError> {
        match ModelArtifact::load(&self.inner.config.model_dir) {
            Ok(artifact) => {
                let artifact = Arc::new(artifact);
                self.set(ModelState::Ready(Arc::clone(&artifact)));
                Ok(artifact)
            }
            Err(e) => {
                if !matches!(self.model_state(), ModelState::Ready(_)) {
                    self.set(ModelState::Unavailable(e.to_string()));
                }
                Err(e)
            }
        }
    }

    fn model(&self) -> Result<Arc<ModelArtifact>, ApiError> {
        match self.model_state() {
            ModelState::Ready(a) => Ok(a),
            ModelState::Loading => Err(ApiError::unavailable("model is loading")),
            ModelState::Unavailable(reason) => {
                Err(ApiError::unavailable(format!("no model loaded: {reason}")))
            }
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", message)
    }

    fn too_large(limit: usize) -> Self {
        Self::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("upload exceeds {limit} bytes"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config().max_upload_bytes;
    Router::new()
        .route("/api/v1/classify", post(classify))
        .route("/api/v1/boundary", post(boundary))
        .route("/api/v1/saliency", post(saliency))
        .route("/api/v1/model", get(model_info))
        .route("/api/v1/model/reload", post(reload))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds, starts loading the model in the background and serves until the
/// listener fails. Requests get 503 until the model is ready.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let listener = TcpListener::bind(config.bind).await?;
    serve_on(listener, config).await
}

pub async fn serve_on(listener: TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(config);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = loader.load_blocking() {
            eprintln!("model load failed: {e}");
        }
    });
    axum::serve(listener, router(state)).await
}

/// Probabilities go over the wire with six decimals.
pub fn round6(p: f64) -> f64 {
    (p * 1e6).round() / 1e6
}

struct Upload {
    image: Vec<u8>,
    fields: HashMap<String, String>,
}

async fn read_upload(
    state: &AppState,
    headers: &HeaderMap,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Upload, ApiError> {
    let limit = state.config().max_upload_bytes;
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > limit) {
        return Err(ApiError::too_large(limit));
    }
    let mut multipart = multipart.map_err(|e| ApiError::bad_request("bad_multipart", e.body_text()))?;
    let mut image = None;
    let mut fields = HashMap::new();
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(ApiError::too_large(limit)),
            Err(e) => return Err(ApiError::bad_request("bad_multipart", e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b,
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(ApiError::too_large(limit)),
            Err(e) => return Err(ApiError::bad_request("bad_multipart", e.body_text())),
        };
        if name == IMAGE_FIELD {
            image = Some(bytes.to_vec());
        } else {
            fields.insert(name, String::from_utf8_lossy(&bytes).into_owned());
        }
    }
    let image =
        image.ok_or_else(|| ApiError::bad_request("missing_image", "multipart field `image` is required"))?;
    Ok(Upload { image, fields })
}

fn decode_upload(bytes: &[u8]) -> Result<RgbImage, ApiError> {
    if bytes.is_empty() {
        return Err(ApiError::bad_request("empty_image", "image is empty"));
    }
    match image::guess_format(bytes) {
        Ok(ImageFormat::Png | ImageFormat::Jpeg) => {}
        Ok(other) => {
            return Err(ApiError::bad_request(
                "unsupported_format",
                format!("{other:?} images are not accepted, send PNG or JPEG"),
            ))
        }
        Err(e) => return Err(ApiError::bad_request("undecodable_image", e.to_string())),
    }
    decode_image(bytes).map_err(|e| ApiError::bad_request("undecodable_image", e.to_string()))
}

/// Runs CPU-bound work on the blocking pool under the request timeout.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    work: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let task = tokio::task::spawn_blocking(work);
    match tokio::time::timeout(state.config().request_timeout, task).await {
        Ok(Ok(result)) => result,
        Ok(Err(join)) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            join.to_string(),
        )),
        Err(_) => Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "timeout",
            "request timed out",
        )),
    }
}

fn wire_result(r: ClassificationResult) -> ClassificationResult {
    ClassificationResult {
        probability: round6(r.probability),
        ..r
    }
}

async fn classify(
    State(state): State<AppState>,
    headers: HeaderMap,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Json<ClassificationResult>, ApiError> {
    let model = state.model()?;
    let upload = read_upload(&state, &headers, multipart).await?;
    let result = blocking(&state, move || {
        let image = decode_upload(&upload.image)?;
        Ok(model.predict(&image))
    })
    .await?;
    Ok(Json(wire_result(result)))
}

#[derive(Debug, Serialize)]
struct WireStrip {
    index: usize,
    x0: u32,
    x1: u32,
    probability: f64,
    label: Label,
}

impl From<StripClassification> for WireStrip {
    fn from(s: StripClassification) -> Self {
        Self {
            index: s.index,
            x0: s.x0,
            x1: s.x1,
            probability: round6(s.probability),
            label: s.label,
        }
    }
}

#[derive(Debug, Serialize)]
struct BoundaryResponse {
    boundary_x: Option<u32>,
    distal_direction: DistalDirection,
    axis: Axis,
    strip_width: u32,
    strips: Vec<WireStrip>,
    contiguous: bool,
    saturated: bool,
    threshold: f64,
    model_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<&'static str>,
}

impl BoundaryResponse {
    fn new(
        e: BoundaryEstimate,
        options: &BoundaryOptions,
        version: String,
        reason: Option<&'static str>,
    ) -> Self {
        Self {
            boundary_x: e.boundary_x,
            distal_direction: e.distal_direction,
            axis: options.axis,
            strip_width: options.strip_width,
            strips: e.strips.into_iter().map(WireStrip::from).collect(),
            contiguous: e.contiguous,
            saturated: e.saturated,
            threshold: e.threshold,
            model_version: version,
            reason,
        }
    }
}

fn parse_param<T: std::str::FromStr>(
    query: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    query
        .get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| ApiError::bad_request("bad_parameter", format!("invalid `{key}`: {e}")))
        })
        .transpose()
}

fn boundary_options(query: &HashMap<String, String>) -> Result<BoundaryOptions, ApiError> {
    let defaults = BoundaryOptions::default();
    let strip_width = parse_param::<u32>(query, "strip_width")?.unwrap_or(defaults.strip_width);
    if strip_width == 0 {
        return Err(ApiError::bad_request(
            "bad_parameter",
            "`strip_width` must be at least 1",
        ));
    }
    let threshold = parse_param::<f64>(query, "threshold")?;
    if threshold.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
        return Err(ApiError::bad_request(
            "bad_parameter",
            "`threshold` must lie in [0, 1]",
        ));
    }
    Ok(BoundaryOptions {
        strip_width,
        axis: parse_param(query, "axis")?.unwrap_or(defaults.axis),
        distal_direction: parse_param(query, "distal")?.unwrap_or(defaults.distal_direction),
        threshold,
    })
}

async fn boundary(
    State(state): State<AppState>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Json<BoundaryResponse>, ApiError> {
    let options = boundary_options(&query)?;
    let model = state.model()?;
    let upload = read_upload(&state, &headers, multipart).await?;
    let response = blocking(&state, move || {
        let image = decode_upload(&upload.image)?;
        let version = model.version().to_string();
        match analyze(&model, &image, &options) {
            Ok(e) => Ok(BoundaryResponse::new(e, &options, version, None)),
            // a finding, not a failure
            Err(BoundaryError::NoFluorescentRegion(e)) => Ok(BoundaryResponse::new(
                *e,
                &options,
                version,
                Some("no_fluorescent_region"),
            )),
            Err(e) => Err(ApiError::bad_request("bad_parameter", e.to_string())),
        }
    })
    .await?;
    Ok(Json(response))
}

async fn saliency(
    State(state): State<AppState>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Response, ApiError> {
    let model = state.model()?;
    let upload = read_upload(&state, &headers, multipart).await?;
    // query wins over a form field of the same name
    let mut params = upload.fields.clone();
    params.extend(query);
    let opacity = parse_param::<f64>(&params, "opacity")?.unwrap_or(DEFAULT_OPACITY);
    if !(0.0..=1.0).contains(&opacity) {
        return Err(ApiError::bad_request(
            "bad_parameter",
            "`opacity` must lie in [0, 1]",
        ));
    }
    let (png, version, method) = blocking(&state, move || {
        let image = decode_upload(&upload.image)?;
        let map = compute_saliency(&model, &image, None);
        let overlay = render_overlay(&image, &map, opacity)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        let png = encode_png(&overlay)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        Ok((png, map.model_version, map.method_id))
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-model-version"), version),
            (header::HeaderName::from_static("x-saliency-method"), method),
        ],
        png,
    )
        .into_response())
}

#[derive(Debug, Serialize)]
struct ModelInfo {
    architecture_id: String,
    input_size: u32,
    threshold: f64,
    version: String,
    preprocessing: Preprocessing,
    training_summary: Option<TrainingSummary>,
}

impl From<&ModelArtifact> for ModelInfo {
    fn from(a: &ModelArtifact) -> Self {
        let d = &a.descriptor;
        Self {
            architecture_id: d.architecture_id.clone(),
            input_size: d.input_size,
            threshold: d.threshold,
            version: d.version.clone(),
            preprocessing: d.preprocessing.clone(),
            training_summary: d.training_summary.clone(),
        }
    }
}

async fn model_info(State(state): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(ModelInfo::from(state.model()?.as_ref())))
}

async fn reload(State(state): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    let loader = state.clone();
    let artifact = blocking(&state, move || {
        loader
            .load_blocking()
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "reload_failed", e.to_string()))
    })
    .await?;
    Ok(Json(ModelInfo::from(artifact.as_ref())))
}

async fn healthz(State(state): State<AppState>) -> (StatusCode, &'static str) {
    match state.model_state() {
        ModelState::Ready(_) => (StatusCode::OK, "ok"),
        ModelState::Loading => (StatusCode::SERVICE_UNAVAILABLE, "loading"),
        ModelState::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "model unavailable"),
    }
}
