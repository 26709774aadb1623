//! HTTP API for automatic and instruction-guided restoration sessions.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lmdir_core::network::{guided_restore, Network};
use lmdir_core::priors::PriorPipeline;
use lmdir_core::prompt::MIN_IMAGE_SIDE;
use lmdir_core::{Error as CoreError, TensorImage};
use serde::Deserialize;
use serde_json::json;

use crate::session::{Mode, Session, SessionStore};

pub const MAX_UPLOAD_BYTES: usize = 16 * 1024 * 1024;

pub struct AppState {
    pub network: Arc<Network>,
    pub pipeline: PriorPipeline,
    pub sessions: SessionStore,
    /// Diffusion seed for bundles built on upload.
    pub seed: u64,
}

impl AppState {
    pub fn new(network: Network, pipeline: PriorPipeline) -> Self {
        Self { network: Arc::new(network), pipeline, sessions: SessionStore::default(), seed: 0 }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }

    fn invalid_body(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        match e {
            CoreError::ProviderUnavailable(_) | CoreError::MalformedResponse(_) | CoreError::EmbeddingShapeMismatch { .. } => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "provider_unavailable", message)
            }
            CoreError::Codec(_) | CoreError::ImageTooSmall { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_image", message)
            }
            CoreError::EmptyText => Self::invalid_body(message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/restore", post(restore))
        .route("/api/sessions/{id}/history", get(history))
        .route("/api/images/{image_id}", get(image))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// The API plus static files from `ui_dir` for every other path.
pub fn router_with_ui(state: Arc<AppState>, ui_dir: PathBuf) -> Router {
    router(state).fallback_service(tower_http::services::ServeDir::new(ui_dir))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    multipart: Result<Multipart, MultipartRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let mut multipart = multipart.map_err(|e| ApiError::invalid_body(e.body_text()))?;
    let mut bytes = None;
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        let is_image = field.name() == Some("image") || field.file_name().is_some();
        let data = field.bytes().await.map_err(multipart_error)?;
        if is_image {
            bytes = Some(data);
            break;
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::invalid_body("multipart body has no image field"))?;
    let response = blocking(move || {
        let image = TensorImage::decode(&bytes)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_image", e.to_string()))?;
        let (height, width) = (image.height(), image.width());
        if height.min(width) < MIN_IMAGE_SIDE {
            return Err(CoreError::ImageTooSmall { height, width, min: MIN_IMAGE_SIDE }.into());
        }
        let bundle = state.pipeline.build_bundle(&image, state.seed)?;
        let priors = json!({
            "degradation_text": bundle.texts.degradation_text,
            "content_text": bundle.texts.content_text,
        });
        let session = Session::new(image, Arc::new(bundle))?;
        let body = json!({"session_id": session.id, "image_id": session.current_id, "priors": priors});
        state.sessions.insert(session);
        Ok(body)
    })
    .await?;
    Ok(Json(response))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", format!("uploads are limited to {MAX_UPLOAD_BYTES} bytes"))
    } else {
        ApiError::invalid_body(e.body_text())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreRequest {
    pub mode: Mode,
    #[serde(default)]
    pub instruction: Option<String>,
}

async fn restore(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<RestoreRequest>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let session = state.sessions.get(&id).ok_or_else(|| ApiError::session_not_found(&id))?;
    let Json(req) = body.map_err(|e| ApiError::invalid_body(e.body_text()))?;
    let instruction = match (req.mode, req.instruction) {
        (Mode::Guided, Some(text)) if !text.trim().is_empty() => Some(text),
        (Mode::Guided, _) => return Err(ApiError::invalid_body("guided mode needs a non-empty instruction")),
        (Mode::Auto, _) => None,
    };
    let response = blocking(move || {
        let mut session = session.lock().expect("session");
        let bundle = session.bundle.clone();
        let (output, degradation_text) = match &instruction {
            Some(text) => (guided_restore(&state.network, &session.current, text, &bundle, &state.pipeline)?, text.clone()),
            None => (state.network.restore(&session.current, &bundle)?, bundle.texts.degradation_text.clone()),
        };
        let step = session.push(output, req.mode, instruction)?;
        Ok(json!({
            "output_image_id": step.output_image_id,
            "psnr": null,
            "priors_used": {"degradation_text": degradation_text, "content_text": bundle.texts.content_text},
        }))
    })
    .await?;
    Ok(Json(response))
}

async fn history(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let session = state.sessions.get(&id).ok_or_else(|| ApiError::session_not_found(&id))?;
    let steps = blocking(move || Ok(session.lock().expect("session").steps.clone())).await?;
    Ok(Json(serde_json::to_value(steps).expect("steps serialize")))
}

async fn image(State(state): State<Arc<AppState>>, Path(image_id): Path<String>) -> ApiResult<Response> {
    let png = state
        .sessions
        .image(&image_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "image_not_found", format!("no image {image_id}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response())
}
