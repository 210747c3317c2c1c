//! HTTP routes over [`crate::api`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use crate::api::{embeddings_info, handle_generate, model_summary, parse_request, AppState};
use crate::error::{ApiError, ErrorBody};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { error: self.message })).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/embeddings", get(embeddings))
        .with_state(state)
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req = parse_request(&body)?;
    let result = tokio::task::spawn_blocking(move || handle_generate(&state, &req))
        .await
        .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))??;
    Ok(Json(result).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let loaded = state.model.lock().map(|m| m.is_some()).unwrap_or(false);
    Json(json!({ "status": "ok", "model_loaded": loaded }))
}

async fn model(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    Ok(Json(model_summary(&state)?).into_response())
}

async fn embeddings(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    Ok(Json(embeddings_info(&state)?).into_response())
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
