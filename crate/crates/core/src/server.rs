//! HTTP+JSON API over a [`Twin`].

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::twin::{RawWindow, Twin, TwinError};

#[derive(Debug, Clone, Deserialize)]
pub struct PredictRequest {
    pub window: Vec<Vec<f64>>,
    #[serde(default)]
    pub start: Option<NaiveDateTime>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct WhatifRequest {
    pub window: Vec<Vec<f64>>,
    #[serde(default)]
    pub start: Option<NaiveDateTime>,
    #[serde(default)]
    pub action: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NavigateRequest {
    pub window: Vec<Vec<f64>>,
    #[serde(default)]
    pub start: Option<NaiveDateTime>,
    pub modules: Vec<String>,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
}

fn default_top_n() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

struct Failure(StatusCode, ApiError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<TwinError> for Failure {
    fn from(e: TwinError) -> Self {
        let status = match e {
            TwinError::Model(_) | TwinError::Physics(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Failure(
            status,
            ApiError {
                code: e.code().to_string(),
                message: e.to_string(),
            },
        )
    }
}

impl From<JsonRejection> for Failure {
    fn from(e: JsonRejection) -> Self {
        Failure(
            StatusCode::BAD_REQUEST,
            ApiError {
                code: "malformed_body".into(),
                message: e.body_text(),
            },
        )
    }
}

type Shared = Arc<Twin>;

async fn blocking<T: Send + 'static>(
    twin: &Shared,
    f: impl FnOnce(&Twin) -> Result<T, TwinError> + Send + 'static,
) -> Result<T, Failure> {
    let t = twin.clone();
    tokio::task::spawn_blocking(move || f(&t))
        .await
        .map_err(|e| {
            Failure(
                StatusCode::INTERNAL_SERVER_ERROR,
                ApiError {
                    code: "internal".into(),
                    message: e.to_string(),
                },
            )
        })?
        .map_err(Failure::from)
}

async fn health(State(twin): State<Shared>) -> impl IntoResponse {
    let ck = twin.checkpoint();
    Json(json!({
        "status": "ok",
        "model": {
            "experts": ck.model.config.experts.iter().map(|k| k.name()).collect::<Vec<_>>(),
            "hidden": ck.model.config.hidden,
            "seed": ck.seed,
            "schema_hash": ck.spec.schema_hash,
        }
    }))
}

async fn meta(State(twin): State<Shared>) -> impl IntoResponse {
    Json(twin.meta())
}

async fn regimes(State(twin): State<Shared>) -> Response {
    match twin.clusters() {
        Some(c) => Json(c).into_response(),
        None => Failure(
            StatusCode::NOT_FOUND,
            ApiError {
                code: "no_clusters".into(),
                message: "service started without regime clusters".into(),
            },
        )
        .into_response(),
    }
}

async fn predict(State(twin): State<Shared>, body: Result<Json<PredictRequest>, JsonRejection>) -> Response {
    let run = async {
        let Json(req) = body?;
        let w = RawWindow {
            rows: req.window,
            start: req.start,
        };
        blocking(&twin, move |t| t.predict(&w)).await
    };
    match run.await {
        Ok(p) => Json(p).into_response(),
        Err(f) => f.into_response(),
    }
}

async fn whatif(State(twin): State<Shared>, body: Result<Json<WhatifRequest>, JsonRejection>) -> Response {
    let run = async {
        let Json(req) = body?;
        let w = RawWindow {
            rows: req.window,
            start: req.start,
        };
        blocking(&twin, move |t| t.whatif(&w, &req.action)).await
    };
    match run.await {
        Ok(p) => Json(p).into_response(),
        Err(f) => f.into_response(),
    }
}

async fn navigate(State(twin): State<Shared>, body: Result<Json<NavigateRequest>, JsonRejection>) -> Response {
    let run = async {
        let Json(req) = body?;
        let w = RawWindow {
            rows: req.window,
            start: req.start,
        };
        blocking(&twin, move |t| t.navigate(&w, &req.modules, req.top_n)).await
    };
    match run.await {
        Ok(p) => Json(p).into_response(),
        Err(f) => f.into_response(),
    }
}

/// API routes, plus a static mount for the console bundle when given.
pub fn router(twin: Arc<Twin>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/meta", get(meta))
        .route("/regimes", get(regimes))
        .route("/predict", post(predict))
        .route("/whatif", post(whatif))
        .route("/navigate", post(navigate))
        .with_state(twin);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(twin: Arc<Twin>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(twin, static_dir)).await
}
