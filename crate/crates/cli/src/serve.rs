//! HTTP face of a single pipeline. Requests are serialized through one lock,
//! so generation runs one prompt at a time.

use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use approxcache::report::RunReport;
use approxcache::{Embedding, Error, ExperimentConfig, Pipeline, PromptRecord};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::{config_error, CliError};

pub struct ServeState {
    pipeline: Pipeline,
    config: serde_json::Value,
    next_id: u64,
}

impl ServeState {
    /// Builds the pipeline and warms it with the configured preload.
    pub fn new(config: &ExperimentConfig) -> Result<Self, CliError> {
        let mut pipeline = config.build_pipeline().map_err(config_error)?;
        let mut prompts = config.prompts()?;
        let n = approxcache::workload::preload(&mut prompts, config.workload.preload, &mut pipeline)?;
        info!("preloaded {n} prompts");
        Ok(ServeState {
            pipeline,
            config: serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?,
            next_id: 0,
        })
    }

    pub fn report(&self) -> RunReport {
        let mut r = self.pipeline.report();
        r.config = self.config.clone();
        r
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }
}

pub type Shared = Arc<Mutex<ServeState>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    id: Option<String>,
    #[serde(default)]
    user: String,
    text: Option<String>,
    embedding: Option<Embedding>,
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn lock(state: &Shared) -> MutexGuard<'_, ServeState> {
    state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn is_client_error(e: &Error) -> bool {
    matches!(
        e,
        Error::DimensionMismatch { .. }
            | Error::DegenerateEmbedding
            | Error::NonFinite
            | Error::EmptyText
            | Error::EmptyPrompt(_)
    )
}

async fn generate(State(state): State<Shared>, body: Bytes) -> Response {
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let mut s = lock(&state);
    let id = req.id.unwrap_or_else(|| format!("req{:08}", s.next_id));
    let ts = s.next_id as i64;
    s.next_id += 1;
    let prompt = match PromptRecord::new(id, req.user, ts, req.text, req.embedding) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match s.pipeline.handle_prompt(&prompt) {
        Ok(outcome) => Json(outcome).into_response(),
        Err(e) if is_client_error(&e) => error(StatusCode::BAD_REQUEST, e),
        Err(e) => {
            warn!("request {} failed: {e}", prompt.id);
            error(StatusCode::INTERNAL_SERVER_ERROR, e)
        }
    }
}

async fn metrics(State(state): State<Shared>) -> Json<RunReport> {
    Json(lock(&state).report())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/metrics", get(metrics))
        .with_state(state)
}

pub struct ShutdownOutputs {
    pub report: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
}

/// Serves until `shutdown` resolves, then flushes pending index changes and
/// writes the final report (to stdout when no path is set) and snapshot.
pub async fn serve(
    listener: TcpListener,
    state: Shared,
    outputs: ShutdownOutputs,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<RunReport, CliError> {
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    let mut s = lock(&state);
    s.pipeline.flush()?;
    let report = s.report();
    let body = report.to_json()?;
    match &outputs.report {
        Some(path) => std::fs::write(path, &body)?,
        None => println!("{body}"),
    }
    if let Some(path) = &outputs.snapshot {
        s.pipeline.index().snapshot(path)?;
    }
    Ok(report)
}
