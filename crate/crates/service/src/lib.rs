//! HTTP+JSON interface for live elicitation sessions.
//!
//! | method | path | purpose |
//! |---|---|---|
//! | POST | `/sessions` | create a session from `{config, seed}` and start its first segment |
//! | GET | `/sessions/{id}/state` | phase, round, mixing weights, responsibilities and mean soft graphs |
//! | GET | `/sessions/{id}/queries` | pending queries in EIG rank order |
//! | POST | `/sessions/{id}/responses` | `[{component, edge, psi_star}]` |
//! | POST | `/sessions/{id}/advance` | close the round and run the next segment (202) |
//! | GET | `/sessions/{id}/snapshot` | the full session state |
//! | GET | `/sessions/{id}/log` | the NDJSON command and progress log |
//!
//! Inference segments run on a blocking worker; requests only ever see the
//! state between segments.

pub mod error;
pub mod session;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use causalmix::bed::Query;
use causalmix::elicit_loop::{ElicitationSession, Phase, StopReason};
use causalmix::elicitation::ElicitationRecord;
use causalmix::experiment::{ExperimentConfig, SCHEMA_VERSION};
use causalmix::metrics::map_labels;
use serde::{Deserialize, Serialize};

pub use error::{ServiceError, ServiceResult};
pub use session::{LiveSession, LogEntry, ResponseIn};

type Shared = Arc<Mutex<LiveSession>>;

pub struct AppState {
    sessions: RwLock<HashMap<String, Shared>>,
    next_id: AtomicU64,
    log_dir: Option<PathBuf>,
}

impl AppState {
    /// Sessions persist their logs under `log_dir` when given.
    pub fn new(log_dir: Option<PathBuf>) -> Self {
        Self {
            sessions: RwLock::default(),
            next_id: AtomicU64::new(1),
            log_dir,
        }
    }

    /// Replays every `session-*.ndjson` log in `dir` and keeps persisting
    /// there.
    pub fn recover(dir: &Path) -> ServiceResult<Self> {
        let state = Self::new(Some(dir.to_path_buf()));
        let mut max_id = 0;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("session-") && n.ends_with(".ndjson"))
            })
            .collect();
        paths.sort();
        for path in paths {
            let entries = session::read_log(&path)?;
            let live = LiveSession::replay(&entries, Some(&path))?;
            if let Ok(n) = live.id.parse::<u64>() {
                max_id = max_id.max(n);
            }
            log::info!("recovered session {} from {}", live.id, path.display());
            state.insert(live);
        }
        state.next_id.store(max_id + 1, Ordering::SeqCst);
        Ok(state)
    }

    fn insert(&self, live: LiveSession) -> Shared {
        let id = live.id.clone();
        let shared = Arc::new(Mutex::new(live));
        self.sessions.write().expect("session map lock").insert(id, shared.clone());
        shared
    }

    pub fn get(&self, id: &str) -> ServiceResult<Shared> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/queries", get(get_queries))
        .route("/sessions/{id}/responses", post(post_responses))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/snapshot", get(get_snapshot))
        .route("/sessions/{id}/log", get(get_log))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn lock(shared: &Shared) -> std::sync::MutexGuard<'_, LiveSession> {
    shared.lock().expect("session lock")
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ServiceResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ServiceError::Invalid(e.body_text()))
}

/// Runs the next inference segment on a blocking worker.
fn spawn_segment(shared: Shared) {
    let (session, data) = lock(&shared).begin_segment();
    tokio::task::spawn_blocking(move || {
        let outcome = session::run_segment(session, &data);
        let mut live = lock(&shared);
        if let Err(e) = live.finish_segment(outcome) {
            log::error!("session {}: could not record segment: {e}", live.id);
        }
    });
}

fn location(id: &str) -> String {
    format!("/sessions/{id}/state")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub config: ExperimentConfig,
    /// Defaults to the first seed of the config.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub id: String,
    pub phase: Phase,
    pub location: String,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    payload: Result<Json<CreateRequest>, JsonRejection>,
) -> ServiceResult<Response> {
    let req = body(payload)?;
    let seed = req.seed.unwrap_or_else(|| req.config.seeds.first().copied().unwrap_or(0));
    let id = app.next_id.fetch_add(1, Ordering::SeqCst).to_string();
    let log_path = app.log_dir.as_ref().map(|d| d.join(format!("session-{id}.ndjson")));
    let live = LiveSession::create(id.clone(), req.config, seed, log_path.as_deref())?;
    let shared = app.insert(live);
    spawn_segment(shared);
    let loc = location(&id);
    let accepted = Accepted {
        id,
        phase: Phase::Inferring,
        location: loc.clone(),
    };
    Ok((StatusCode::CREATED, [(header::LOCATION, loc)], Json(accepted)).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: usize,
    /// Mean soft graph over retained particles, rounded to 4 decimals.
    pub soft_graph: Vec<Vec<f64>>,
    pub mean_responsibility: f64,
    /// Rows whose most probable component is this one.
    pub assigned_rows: usize,
    pub retained_particles: usize,
    pub records: Vec<ElicitationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateSummary {
    pub schema_version: u32,
    pub id: String,
    pub phase: Phase,
    pub running: bool,
    /// Completed query rounds.
    pub round: usize,
    pub segment: usize,
    pub queries_answered: usize,
    pub alpha: Vec<f64>,
    pub responsibilities_entropy: f64,
    pub components: Vec<ComponentSummary>,
    pub converged: bool,
    pub restarts: usize,
    pub stop_reason: Option<StopReason>,
    pub error: Option<String>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn summarize(live: &LiveSession) -> ServiceResult<StateSummary> {
    let s: &ElicitationSession = &live.session;
    let state = &s.state;
    let omega = s.inference.schedules.omega(state.step().max(1));
    let resp = &state.responsibilities;
    let n = resp.nrows().max(1) as f64;
    let labels = map_labels(resp);
    let entropy = resp
        .rows()
        .into_iter()
        .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / n;
    let components = state
        .components
        .iter()
        .enumerate()
        .map(|(k, comp)| {
            let g = comp.mean_soft_graph(omega)?;
            Ok(ComponentSummary {
                component: k,
                soft_graph: g.rows().into_iter().map(|r| r.iter().map(|&v| round4(v)).collect()).collect(),
                mean_responsibility: resp.column(k).sum() / n,
                assigned_rows: labels.iter().filter(|&&l| l == k).count(),
                retained_particles: comp.retained_indices().len(),
                records: comp.beliefs.records.clone(),
            })
        })
        .collect::<causalmix::Result<Vec<_>>>()?;
    Ok(StateSummary {
        schema_version: SCHEMA_VERSION,
        id: live.id.clone(),
        phase: if live.running { Phase::Inferring } else { s.phase },
        running: live.running,
        round: s.rounds_done,
        segment: state.segment,
        queries_answered: s.queries_answered(),
        alpha: state.dirichlet_alpha.clone(),
        responsibilities_entropy: entropy,
        components,
        converged: state.converged,
        restarts: state.restarts,
        stop_reason: s.stop_reason,
        error: live.error.clone(),
    })
}

async fn get_state(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Json<StateSummary>> {
    let shared = app.get(&id)?;
    let live = lock(&shared);
    Ok(Json(summarize(&live)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryList {
    pub phase: Phase,
    pub round: usize,
    pub queries: Vec<Query>,
}

async fn get_queries(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Json<QueryList>> {
    let shared = app.get(&id)?;
    let live = lock(&shared);
    let visible = !live.running && live.phase() == Phase::AwaitingResponses;
    Ok(Json(QueryList {
        phase: if live.running { Phase::Inferring } else { live.phase() },
        round: live.session.rounds_done,
        queries: if visible { live.session.pending.clone() } else { Vec::new() },
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResponsesAccepted {
    pub records: Vec<ElicitationRecord>,
    pub pending: usize,
}

async fn post_responses(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<Vec<ResponseIn>>, JsonRejection>,
) -> ServiceResult<Json<ResponsesAccepted>> {
    let shared = app.get(&id)?;
    let responses = body(payload)?;
    let mut live = lock(&shared);
    let records = live.submit(responses)?;
    Ok(Json(ResponsesAccepted {
        records,
        pending: live.session.pending.len(),
    }))
}

async fn advance(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Response> {
    let shared = app.get(&id)?;
    {
        let mut live = lock(&shared);
        if live.running || live.phase() != Phase::AwaitingResponses {
            return Err(ServiceError::Conflict(format!(
                "can only advance while awaiting responses (phase {:?})",
                if live.running { Phase::Inferring } else { live.phase() }
            )));
        }
        live.advance()?;
    }
    spawn_segment(shared);
    let loc = location(&id);
    let accepted = Accepted {
        id,
        phase: Phase::Inferring,
        location: loc.clone(),
    };
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, loc)], Json(accepted)).into_response())
}

async fn get_snapshot(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ServiceResult<Json<ElicitationSession>> {
    let shared = app.get(&id)?;
    let live = lock(&shared);
    Ok(Json(live.session.clone()))
}

async fn get_log(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Response> {
    let shared = app.get(&id)?;
    let live = lock(&shared);
    let mut out = Vec::new();
    for entry in &live.log {
        serde_json::to_writer(&mut out, entry)?;
        out.push(b'\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
}
