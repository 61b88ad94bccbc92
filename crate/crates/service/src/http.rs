use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use attic_core::exec::Exec;
use attic_core::experiment::ExperimentConfig;
use attic_core::oracle::{Choice, Confidence, Vote};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::error::ApiError;
use crate::state::{Service, ServiceMode};

#[derive(Clone)]
pub struct AppState {
    service: Arc<Mutex<Service>>,
    static_dir: PathBuf,
}

impl AppState {
    pub fn new(service: Service) -> Self {
        let static_dir = service.data_dir().join("static");
        Self {
            service: Arc::new(Mutex::new(service)),
            static_dir,
        }
    }

    /// Runs `f` on a blocking thread while holding the service lock; all
    /// mutations, and so all event-log writes, are serialized here.
    async fn with<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&mut Service) -> Result<T, ApiError> + Send + 'static,
    {
        let service = Arc::clone(&self.service);
        tokio::task::spawn_blocking(move || {
            let mut guard = service.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
            f(&mut guard)
        })
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
    }
}

#[derive(Deserialize)]
struct TasksQuery {
    limit: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VoteBody {
    choice: Choice,
    confidence: Confidence,
    voter: String,
}

const DEFAULT_TASK_LIMIT: usize = 20;

async fn list_tasks(State(app): State<AppState>, Query(q): Query<TasksQuery>) -> impl IntoResponse {
    let limit = q.limit.unwrap_or(DEFAULT_TASK_LIMIT);
    app.with(move |s| s.list_tasks(limit)).await.map(Json)
}

async fn post_vote(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> impl IntoResponse {
    let body: VoteBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed vote: {e}")))?;
    let vote = Vote {
        choice: body.choice,
        confidence: body.confidence,
        voter: body.voter,
    };
    app.with(move |s| s.vote(&id, vote)).await.map(Json)
}

async fn list_experiments(State(app): State<AppState>) -> impl IntoResponse {
    app.with(|s| Ok(s.list_experiments())).await.map(Json)
}

async fn create_experiment(State(app): State<AppState>, body: Bytes) -> impl IntoResponse {
    let config: ExperimentConfig = serde_json::from_slice(&body)
        .map_err(|e| ApiError::validation(vec![("body".into(), e.to_string())]))?;
    app.with(move |s| s.create_experiment(config))
        .await
        .map(|status| (StatusCode::CREATED, Json(status)))
}

async fn experiment_status(State(app): State<AppState>, Path(id): Path<String>) -> impl IntoResponse {
    app.with(move |s| s.status(&id)).await.map(Json)
}

async fn curves(State(app): State<AppState>, Path(id): Path<String>) -> impl IntoResponse {
    app.with(move |s| {
        let c = s.curves(&id)?;
        Ok(serde_json::json!({
            "experiment_id": id,
            "rows": c.rows,
            "summary": c.summary,
            "csv": c.to_csv(),
        }))
    })
    .await
    .map(Json)
}

async fn advance(State(app): State<AppState>, Path(id): Path<String>) -> impl IntoResponse {
    app.with(move |s| s.advance(&id)).await.map(Json)
}

async fn static_png(State(app): State<AppState>, Path(file): Path<String>) -> impl IntoResponse {
    let key = file.strip_suffix(".png").unwrap_or("");
    if key.len() != 64 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ApiError::not_found("no such image"));
    }
    let bytes = tokio::fs::read(app.static_dir.join(&file))
        .await
        .map_err(|_| ApiError::not_found("no such image"))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/tasks", get(list_tasks))
        .route("/api/v1/tasks/{id}/votes", post(post_vote))
        .route("/api/v1/experiments", get(list_experiments).post(create_experiment))
        .route("/api/v1/experiments/{id}", get(experiment_status))
        .route("/api/v1/experiments/{id}/curves", get(curves))
        .route("/api/v1/experiments/{id}/advance", post(advance))
        .route("/static/{file}", get(static_png))
        .with_state(state)
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub mode: ServiceMode,
    pub exec: Exec,
}

/// Replays the event log in `data_dir`, then serves until Ctrl-C.
pub async fn serve(opts: ServeOptions) -> std::io::Result<()> {
    let (data_dir, mode, exec) = (opts.data_dir.clone(), opts.mode, opts.exec);
    let service = tokio::task::spawn_blocking(move || Service::open(&data_dir, mode, exec))
        .await
        .map_err(std::io::Error::other)?
        .map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(AppState::new(service)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
