//! HTTP API over campaign sessions.
//!
//! Each campaign sits behind an async mutex that serializes mutations; reads
//! return the snapshot published after the last mutation. `step` runs on the
//! blocking pool and is tracked by a pollable job handle.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tad_core::campaign::{Ingested, IterationRecord};
use tad_core::TadError;
use tokio::sync::Mutex;

use crate::config::CampaignConfig;
use crate::error::CliError;
use crate::persist::save_state;
use crate::session::{Session, Snapshot, StepReport};

struct Published {
    snapshot: Snapshot,
    history: Arc<Vec<IterationRecord>>,
}

struct Slot {
    session: Arc<Mutex<Session>>,
    published: RwLock<Published>,
    /// Where to persist after each mutation, if anywhere.
    state_path: Option<PathBuf>,
}

impl Slot {
    fn new(session: Session, state_path: Option<PathBuf>) -> Self {
        let published = RwLock::new(Published {
            snapshot: session.snapshot(),
            history: Arc::new(session.state.history.clone()),
        });
        Self {
            session: Arc::new(Mutex::new(session)),
            published,
            state_path,
        }
    }

    fn publish(&self, session: &Session) {
        if let Some(path) = &self.state_path {
            if let Err(err) = save_state(&session.config, &session.state, path) {
                tracing::error!(%err, "failed to persist campaign state");
            }
        }
        let mut p = self.published.write().expect("snapshot lock poisoned");
        p.snapshot = session.snapshot();
        if p.history.len() != session.state.history.len() {
            p.history = Arc::new(session.state.history.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done { result: StepReport },
    Failed { error: String },
}

#[derive(Default)]
struct Inner {
    campaigns: RwLock<HashMap<u64, Arc<Slot>>>,
    jobs: RwLock<HashMap<u64, JobStatus>>,
    next_campaign: AtomicU64,
    next_job: AtomicU64,
}

#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a campaign and returns its identifier.
    pub fn insert(&self, session: Session, state_path: Option<PathBuf>) -> u64 {
        let id = self.inner.next_campaign.fetch_add(1, Ordering::SeqCst) + 1;
        self.inner
            .campaigns
            .write()
            .expect("campaign table poisoned")
            .insert(id, Arc::new(Slot::new(session, state_path)));
        id
    }

    fn slot(&self, id: u64) -> Result<Arc<Slot>, ApiError> {
        self.inner
            .campaigns
            .read()
            .expect("campaign table poisoned")
            .get(&id)
            .cloned()
            .ok_or(ApiError::NotFound(format!("campaign {id}")))
    }

    fn set_job(&self, id: u64, status: JobStatus) {
        self.inner
            .jobs
            .write()
            .expect("job table poisoned")
            .insert(id, status);
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.inner
            .jobs
            .read()
            .expect("job table poisoned")
            .get(&id)
            .cloned()
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    Internal(String),
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::NoPendingBatch | CliError::Campaign(TadError::AlreadyTerminated(_)) => {
                Self::Conflict(e.to_string())
            }
            CliError::Campaign(
                TadError::DimensionMismatch { .. }
                | TadError::NonFinite
                | TadError::ContractViolation(_),
            )
            | CliError::Config(_)
            | CliError::Usage(_) => Self::Unprocessable(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, msg) = match self {
            Self::NotFound(m) => (StatusCode::NOT_FOUND, m),
            Self::Conflict(m) => (StatusCode::CONFLICT, m),
            Self::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            Self::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (code, Json(json!({ "error": msg }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct ObservationsBody {
    pub observations: Vec<Vec<f64>>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/campaigns", post(create_campaign))
        .route("/api/v1/campaigns/{id}/state", get(get_state))
        .route("/api/v1/campaigns/{id}/history", get(get_history))
        .route(
            "/api/v1/campaigns/{id}/observations",
            post(post_observations),
        )
        .route("/api/v1/campaigns/{id}/step", post(post_step))
        .route("/api/v1/jobs/{id}", get(get_job))
        .with_state(state)
}

async fn create_campaign(
    State(app): State<AppState>,
    Json(config): Json<CampaignConfig>,
) -> Result<impl IntoResponse, ApiError> {
    let session = tokio::task::spawn_blocking(move || Session::new(config))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let id = app.insert(session, None);
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn get_state(
    State(app): State<AppState>,
    Path(id): Path<u64>,
) -> Result<Json<Snapshot>, ApiError> {
    let slot = app.slot(id)?;
    let snap = slot
        .published
        .read()
        .expect("snapshot lock poisoned")
        .snapshot
        .clone();
    Ok(Json(snap))
}

async fn get_history(
    State(app): State<AppState>,
    Path(id): Path<u64>,
) -> Result<Json<Vec<IterationRecord>>, ApiError> {
    let slot = app.slot(id)?;
    let history = slot
        .published
        .read()
        .expect("snapshot lock poisoned")
        .history
        .clone();
    Ok(Json(history.as_ref().clone()))
}

async fn post_observations(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    Json(body): Json<ObservationsBody>,
) -> Result<impl IntoResponse, ApiError> {
    let slot = app.slot(id)?;
    let mut session = slot.session.clone().lock_owned().await;
    let Some(pending) = session.state.pending_points() else {
        return Err(ApiError::Conflict(CliError::NoPendingBatch.to_string()));
    };
    if body.observations.len() != pending.len() {
        return Err(ApiError::Unprocessable(format!(
            "expected {} observation rows, got {}",
            pending.len(),
            body.observations.len()
        )));
    }
    let slot2 = slot.clone();
    let (ingested, iter) = tokio::task::spawn_blocking(move || {
        let out = session.ingest_rows(&body.observations);
        slot2.publish(&session);
        out.map(|r| (r, session.state.iter))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let status = match ingested {
        Ingested::Initialized => json!({ "status": "initialized", "iter": iter }),
        Ingested::NeedTarget => json!({ "status": "need_target", "iter": iter }),
        Ingested::Completed(record) => {
            json!({ "status": "completed", "iter": iter, "record": record })
        }
    };
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn post_step(
    State(app): State<AppState>,
    Path(id): Path<u64>,
) -> Result<impl IntoResponse, ApiError> {
    let slot = app.slot(id)?;
    let job = app.inner.next_job.fetch_add(1, Ordering::SeqCst) + 1;
    app.set_job(job, JobStatus::Queued);
    let app2 = app.clone();
    tokio::spawn(async move {
        let mut session = slot.session.clone().lock_owned().await;
        app2.set_job(job, JobStatus::Running);
        let slot2 = slot.clone();
        let res = tokio::task::spawn_blocking(move || {
            let out = session.advance();
            slot2.publish(&session);
            out
        })
        .await;
        let status = match res {
            Ok(Ok(result)) => JobStatus::Done { result },
            Ok(Err(e)) => JobStatus::Failed {
                error: e.to_string(),
            },
            Err(e) => JobStatus::Failed {
                error: e.to_string(),
            },
        };
        app2.set_job(job, status);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": job, "status_url": format!("/api/v1/jobs/{job}") })),
    ))
}

async fn get_job(
    State(app): State<AppState>,
    Path(id): Path<u64>,
) -> Result<Json<JobStatus>, ApiError> {
    app.job(id)
        .map(Json)
        .ok_or(ApiError::NotFound(format!("job {id}")))
}

/// Serves the API on `0.0.0.0:port` until interrupted.
pub async fn serve(app: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(port, "serving campaign API");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
