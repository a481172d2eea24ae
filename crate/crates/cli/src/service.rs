//! HTTP front for the oracle job store, used by the annotation UI.
//!
//! | method | path                    | body                         |
//! |--------|-------------------------|------------------------------|
//! | GET    | `/api/jobs/next?kind=review\|box&worker=ID` |          |
//! | POST   | `/api/jobs/{id}/review` | `{worker, contains}`         |
//! | POST   | `/api/jobs/{id}/boxes`  | `{worker, boxes: [...]}`     |
//! | GET    | `/api/progress`         |                              |
//! | GET    | `/api/images/{id}`      | SVG tile rendering           |
//!
//! Every JSON body carries `version`; requests may omit it. Status codes:
//! 204 no job available, 400 malformed request, 404 unknown job or image,
//! 409 lease lost.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use alforge_core::corpus::World;
use alforge_core::geometry::{BoundingBox, ImageId};
use alforge_core::oracle::{Job, JobError, JobKind, JobResult, JobState, JobStore, Progress, SubmitAck};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::render::render_tile;

pub const API_VERSION: &str = "alforge-api/1";

#[derive(Clone)]
pub struct ServiceState {
    pub store: Arc<JobStore>,
    /// Geometry used for tile renderings. Label state is not read.
    pub world: Arc<World>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub version: String,
    pub error: String,
    pub message: String,
}

fn error(status: StatusCode, error: &str, message: impl Into<String>) -> Response {
    let body = ApiError {
        version: API_VERSION.into(),
        error: error.into(),
        message: message.into(),
    };
    (status, Json(body)).into_response()
}

fn job_error(e: JobError) -> Response {
    match e {
        JobError::NotFound(_) => error(StatusCode::NOT_FOUND, "not_found", e.to_string()),
        JobError::LeaseLost(_) => error(StatusCode::CONFLICT, "lease_lost", e.to_string()),
        JobError::WrongKind { .. } => error(StatusCode::BAD_REQUEST, "wrong_kind", e.to_string()),
        JobError::NotReviewedPositive(_) => error(StatusCode::BAD_REQUEST, "not_reviewed_positive", e.to_string()),
    }
}

fn check_version(v: &Option<String>) -> Option<Response> {
    match v {
        Some(v) if v != API_VERSION => Some(error(
            StatusCode::BAD_REQUEST,
            "version_mismatch",
            format!("expected {API_VERSION:?}, got {v:?}"),
        )),
        _ => None,
    }
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub kind: JobKind,
    pub worker: String,
}

/// A leased job as the UI sees it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeasedJob {
    pub version: String,
    pub job_id: u64,
    pub kind: JobKind,
    pub image_id: ImageId,
    pub iteration: u32,
    pub worker: String,
    pub deadline_ms: u64,
    pub image_url: String,
    pub tile_size: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewSubmit {
    #[serde(default)]
    pub version: Option<String>,
    pub worker: String,
    pub contains: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxesSubmit {
    #[serde(default)]
    pub version: Option<String>,
    pub worker: String,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitReply {
    pub version: String,
    pub job_id: u64,
    /// `stored` or `duplicate`.
    pub status: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProgressReply {
    pub version: String,
    #[serde(flatten)]
    pub progress: Progress,
}

async fn next_job(State(s): State<ServiceState>, q: Result<Query<NextQuery>, QueryRejection>) -> Response {
    let Query(q) = match q {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", e.body_text()),
    };
    if q.worker.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "bad_request", "worker must be non-empty");
    }
    let Some(job) = s.store.lease(q.kind, &q.worker) else {
        return StatusCode::NO_CONTENT.into_response();
    };
    leased_view(&s, job).into_response()
}

fn leased_view(s: &ServiceState, job: Job) -> Json<LeasedJob> {
    let (worker, deadline_ms) = match job.state {
        JobState::Leased { worker, deadline_ms } => (worker, deadline_ms),
        _ => unreachable!("lease returns leased jobs"),
    };
    let tile_size = s.world.image(job.image_id).map(|r| r.tile.tile_size).unwrap_or(0);
    Json(LeasedJob {
        version: API_VERSION.into(),
        job_id: job.job_id,
        kind: job.kind,
        image_id: job.image_id,
        iteration: job.iteration,
        worker,
        deadline_ms,
        image_url: format!("/api/images/{}", job.image_id),
        tile_size,
    })
}

fn submit(s: &ServiceState, job_id: u64, worker: &str, result: JobResult) -> Response {
    match s.store.submit(job_id, worker, result) {
        Ok(ack) => Json(SubmitReply {
            version: API_VERSION.into(),
            job_id,
            status: match ack {
                SubmitAck::Stored => "stored",
                SubmitAck::Duplicate => "duplicate",
            }
            .into(),
        })
        .into_response(),
        Err(e) => job_error(e),
    }
}

async fn submit_review(
    State(s): State<ServiceState>,
    Path(job_id): Path<u64>,
    body: Result<Json<ReviewSubmit>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", e.body_text()),
    };
    if let Some(r) = check_version(&body.version) {
        return r;
    }
    submit(
        &s,
        job_id,
        &body.worker,
        JobResult::Review {
            contains: body.contains,
        },
    )
}

async fn submit_boxes(
    State(s): State<ServiceState>,
    Path(job_id): Path<u64>,
    body: Result<Json<BoxesSubmit>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", e.body_text()),
    };
    if let Some(r) = check_version(&body.version) {
        return r;
    }
    let Some(job) = s.store.job(job_id) else {
        return job_error(JobError::NotFound(job_id));
    };
    if let Some(rec) = s.world.image(job.image_id) {
        let t = rec.tile.tile_size as f64;
        if let Some(b) = body.boxes.iter().find(|b| !b.fits_within(t, t)) {
            return error(
                StatusCode::BAD_REQUEST,
                "bad_request",
                format!("box {b:?} extends past the {t}x{t} tile"),
            );
        }
    }
    submit(&s, job_id, &body.worker, JobResult::Boxes { boxes: body.boxes })
}

async fn progress(State(s): State<ServiceState>) -> Json<ProgressReply> {
    Json(ProgressReply {
        version: API_VERSION.into(),
        progress: s.store.progress(),
    })
}

async fn image(State(s): State<ServiceState>, Path(id): Path<u32>) -> Response {
    match s.world.image(ImageId(id)) {
        Some(rec) => (
            [(header::CONTENT_TYPE, "image/svg+xml")],
            render_tile(rec, s.world.config.seed),
        )
            .into_response(),
        None => error(StatusCode::NOT_FOUND, "not_found", format!("unknown image {id}")),
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/api/jobs/next", get(next_job))
        .route("/api/jobs/{id}/review", post(submit_review))
        .route("/api/jobs/{id}/boxes", post(submit_boxes))
        .route("/api/progress", get(progress))
        .route("/api/images/{id}", get(image))
        .with_state(state)
}

/// A service running on its own thread and runtime.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("service thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}

/// Serve `router(state)` on an already bound listener.
pub fn spawn(listener: std::net::TcpListener, state: ServiceState) -> std::io::Result<ServiceHandle> {
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(state))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
