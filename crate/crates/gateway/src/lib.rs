//! Versioned HTTP API over the mission pipeline.
//!
//! All routes live under `/v1`. Bodies are JSON and every error uses the
//! same `{error_kind, detail}` envelope. Live mission telemetry is served as
//! server-sent events that replay the full history before streaming.

pub mod config;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use quadnav_core::grounding::{GroundingOutcome, Grounder, Stage};
use quadnav_core::jsonl::{self, JsonlLog};
use quadnav_core::llm_provider::{HttpProvider, MockProvider, Provider};
use quadnav_core::mission_exec::{
    summarize, DeskConfig, DeskError, Frame, MissionDesk, MissionFeed, MissionRecord, MissionStatus, ScenarioSummary, ScenarioTag,
};
use quadnav_core::nav_sim::Simulator;
use quadnav_core::plan_schema::{ActionCommand, PlanDefect};
use quadnav_core::prompting::{default_template, PromptTemplate};
use quadnav_core::waypoint_world::{load_world, WaypointWorld};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;

pub use config::{ConfigError, ProviderSection, ServiceConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// SSE comment interval while a mission is idle.
pub const KEEP_ALIVE: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("map: {0}")]
    World(#[from] quadnav_core::waypoint_world::WorldError),
    #[error("template: {0}")]
    Template(#[from] quadnav_core::prompting::TemplateError),
    #[error("provider: {0}")]
    Provider(#[from] quadnav_core::llm_provider::ProviderError),
    #[error("fault: {0}")]
    Fault(#[from] quadnav_core::nav_sim::SimError),
    #[error("log {path}: {source}")]
    Log { path: String, source: std::io::Error },
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
}

/// Shared state behind every handler.
pub struct Gateway {
    world: Arc<WaypointWorld>,
    grounder: Arc<Grounder>,
    desk: MissionDesk,
    map_json: String,
    grounding_budget: Duration,
    mission_log: Option<std::path::PathBuf>,
    mock: bool,
}

impl Gateway {
    pub fn from_config(config: &ServiceConfig) -> Result<Arc<Self>, StartupError> {
        config.validate()?;
        let world = Arc::new(load_world(&config.map_path)?);
        let template = match &config.template_path {
            Some(path) => PromptTemplate::load(path, &world)?,
            None => default_template(&world)?,
        };
        let (provider, budget): (Arc<dyn Provider>, Duration) = if config.provider.mock {
            (Arc::new(MockProvider::new(world.clone())), Duration::from_secs(5))
        } else {
            let http = config.provider.http_config()?;
            let budget = http.total_budget() + Duration::from_secs(2);
            (Arc::new(HttpProvider::new(http)?), budget)
        };
        let open_log = |path: &std::path::Path| JsonlLog::open(path).map_err(|source| StartupError::Log { path: path.display().to_string(), source });

        let mut grounder = Grounder::new(world.clone(), Arc::new(template), provider);
        if let Some(path) = &config.outcome_log {
            grounder = grounder.with_log(open_log(path)?);
        }
        let mut sim = Simulator::new(world.clone(), config.cruise_speed);
        for fault in &config.faults {
            sim.inject_fault(fault.clone())?;
        }
        sim.reset(config.seed);
        let mission_log = config.mission_log.as_deref().map(open_log).transpose()?;
        let desk = MissionDesk::start(sim, DeskConfig { policy: config.policy, pace: config.pace }, mission_log);

        let map_json = serde_json::to_string(world.document()).expect("map documents serialize");
        Ok(Arc::new(Gateway {
            world,
            grounder: Arc::new(grounder),
            desk,
            map_json,
            grounding_budget: budget,
            mission_log: config.mission_log.clone(),
            mock: config.provider.mock,
        }))
    }

    pub fn world(&self) -> &Arc<WaypointWorld> {
        &self.world
    }

    pub fn desk(&self) -> &MissionDesk {
        &self.desk
    }

    /// Records from the mission log when one is configured, else from
    /// memory.
    pub fn mission_records(&self) -> std::io::Result<Vec<MissionRecord>> {
        match &self.mission_log {
            Some(path) if path.exists() => jsonl::read_all(path),
            Some(_) => Ok(Vec::new()),
            None => Ok(self.desk.records()),
        }
    }
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    let v1 = Router::new()
        .route("/missions", post(submit_mission).get(list_missions))
        .route("/missions/{id}", get(mission_detail))
        .route("/missions/{id}/abort", post(abort_mission))
        .route("/missions/{id}/events", get(mission_events))
        .route("/map", get(map))
        .route("/metrics", get(metrics))
        .route("/healthz", get(healthz));
    Router::new().nest("/v1", v1).fallback(not_found).with_state(gateway)
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), StartupError> {
    let addr = config.listen_addr()?;
    let gateway = Gateway::from_config(&config)?;
    let listener = TcpListener::bind(addr).await.map_err(|source| StartupError::Bind { addr: addr.to_string(), source })?;
    tracing::info!(%addr, mock = gateway.mock, "gateway listening");
    axum::serve(listener, router(gateway))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| StartupError::Bind { addr: addr.to_string(), source })
}

/// Serves on an already-bound listener; used by tests and embedding.
pub async fn serve_on(listener: TcpListener, gateway: Arc<Gateway>) -> std::io::Result<SocketAddr> {
    let addr = listener.local_addr()?;
    axum::serve(listener, router(gateway)).await?;
    Ok(addr)
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error_kind: &'static str,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub defects: Vec<PlanDefect>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error_kind: &'static str, detail: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { error_kind, detail: detail.into(), outcome_id: None, stage: None, defects: Vec::new() } }
    }

    fn with_outcome(mut self, outcome: &GroundingOutcome) -> Self {
        self.body.outcome_id = Some(outcome.outcome_id.clone());
        self.body.stage = outcome.stage();
        self.body.defects = outcome.defects().to_vec();
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn unknown_mission(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "unknown_mission", format!("no mission `{id}`"))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitRequest {
    instruction: String,
    #[serde(default)]
    scenario_tag: Option<ScenarioTag>,
    #[serde(default)]
    execute: bool,
}

/// Canonical plan body: `{"actions":[...]}`.
#[derive(Debug, Serialize)]
struct PlanBody<'a> {
    actions: &'a [ActionCommand],
}

#[derive(Serialize)]
struct SubmitResponse<'a> {
    outcome_id: &'a str,
    plan: PlanBody<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mission_id: Option<&'a str>,
}

async fn submit_mission(State(gw): State<Arc<Gateway>>, body: Bytes) -> Result<Response, ApiError> {
    let request: SubmitRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))?;
    if request.instruction.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", "instruction is empty"));
    }

    let grounder = gw.grounder.clone();
    let instruction = request.instruction.clone();
    let job = tokio::task::spawn_blocking(move || grounder.ground(&instruction));
    let outcome = match tokio::time::timeout(gw.grounding_budget, job).await {
        Ok(Ok(outcome)) => outcome,
        Ok(Err(join)) => return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", join.to_string())),
        Err(_) => return Err(ApiError::new(StatusCode::BAD_GATEWAY, "provider_unavailable", "grounding exceeded its time budget")),
    };

    let Some(plan) = &outcome.plan else {
        let rejection = outcome.rejection.as_ref().expect("failed outcomes carry a rejection");
        let err = match rejection.stage {
            Stage::Provider => {
                let unavailable = rejection.provider_error.as_ref().is_none_or(|p| p.unavailable);
                let kind = if unavailable { "provider_unavailable" } else { "provider_error" };
                ApiError::new(StatusCode::BAD_GATEWAY, kind, rejection.detail.clone())
            }
            Stage::Prompt => ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", rejection.detail.clone()),
            Stage::Parse | Stage::Validate => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "plan_rejected", rejection.detail.clone()),
        };
        return Err(err.with_outcome(&outcome));
    };

    if !request.execute {
        let body = SubmitResponse { outcome_id: &outcome.outcome_id, plan: PlanBody { actions: &plan.actions }, mission_id: None };
        return Ok((StatusCode::OK, Json(body)).into_response());
    }

    let tag = request.scenario_tag.unwrap_or_default();
    match gw.desk.submit(plan.clone(), &outcome.outcome_id, tag, outcome.provider_latency) {
        Ok(feed) => {
            let body = SubmitResponse {
                outcome_id: &outcome.outcome_id,
                plan: PlanBody { actions: &plan.actions },
                mission_id: Some(feed.mission_id()),
            };
            Ok((StatusCode::ACCEPTED, Json(body)).into_response())
        }
        Err(DeskError::Busy(active)) => Err(ApiError {
            status: StatusCode::CONFLICT,
            body: ErrorBody {
                error_kind: "busy",
                detail: format!("mission `{active}` is still executing"),
                outcome_id: Some(outcome.outcome_id.clone()),
                stage: None,
                defects: Vec::new(),
            },
        }),
        Err(other) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "executor_unavailable", other.to_string())),
    }
}

#[derive(Serialize)]
struct MissionList {
    active: Option<String>,
    missions: Vec<String>,
}

async fn list_missions(State(gw): State<Arc<Gateway>>) -> Json<MissionList> {
    Json(MissionList { active: gw.desk.active(), missions: gw.desk.mission_ids() })
}

#[derive(Serialize)]
struct MissionDetail<'a> {
    mission_id: &'a str,
    outcome_id: &'a str,
    scenario_tag: ScenarioTag,
    plan: PlanBody<'a>,
    status: MissionStatus,
}

async fn mission_detail(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let feed = gw.desk.feed(&id).ok_or_else(|| unknown_mission(&id))?;
    let body = MissionDetail {
        mission_id: feed.mission_id(),
        outcome_id: feed.outcome_id(),
        scenario_tag: feed.scenario_tag(),
        plan: PlanBody { actions: &feed.plan().actions },
        status: feed.status(),
    };
    Ok(Json(body).into_response())
}

async fn abort_mission(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let gw2 = gw.clone();
    let id2 = id.clone();
    let result = tokio::task::spawn_blocking(move || gw2.desk.abort(&id2))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    match result {
        Ok(phase) => Ok(Json(serde_json::json!({ "mission_id": id, "phase": phase.name(), "status": phase })).into_response()),
        Err(DeskError::UnknownMission(_)) => Err(unknown_mission(&id)),
        Err(other) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "executor_unavailable", other.to_string())),
    }
}

fn sse_event(index: usize, frame: &Frame) -> Event {
    let (name, data) = match frame {
        Frame::Event(e) => ("sim_event", serde_json::to_string(e)),
        Frame::Status(s) => ("status", serde_json::to_string(s)),
    };
    Event::default().id(index.to_string()).event(name).data(data.expect("frames serialize"))
}

fn is_terminal(frame: &Frame) -> bool {
    matches!(frame, Frame::Status(s) if s.phase.is_terminal())
}

struct Cursor {
    feed: Arc<MissionFeed>,
    next: usize,
    pending: std::collections::VecDeque<Frame>,
    rx: tokio::sync::watch::Receiver<usize>,
    done: bool,
}

/// Replays from `start` and follows the feed until the terminal status.
fn frame_stream(feed: Arc<MissionFeed>, start: usize) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = feed.subscribe();
    let cursor = Cursor { feed, next: start, pending: Default::default(), rx, done: false };
    stream::unfold(cursor, |mut c| async move {
        loop {
            if c.done {
                return None;
            }
            if let Some(frame) = c.pending.pop_front() {
                let index = c.next;
                c.next += 1;
                c.done = is_terminal(&frame);
                return Some((Ok(sse_event(index, &frame)), c));
            }
            // Mark the current version seen before reading, so a frame pushed
            // in between still wakes us.
            c.rx.borrow_and_update();
            let fresh = c.feed.frames_since(c.next);
            if fresh.is_empty() {
                if c.rx.changed().await.is_err() {
                    return None;
                }
            } else {
                c.pending.extend(fresh);
            }
        }
    })
}

async fn mission_events(State(gw): State<Arc<Gateway>>, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    let feed = gw.desk.feed(&id).ok_or_else(|| unknown_mission(&id))?;
    let start = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<usize>().ok())
        .map_or(0, |last| last + 1);
    let sse = Sse::new(frame_stream(feed, start)).keep_alive(KeepAlive::new().interval(KEEP_ALIVE));
    Ok(sse.into_response())
}

async fn map(State(gw): State<Arc<Gateway>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], gw.map_json.clone()).into_response()
}

async fn metrics(State(gw): State<Arc<Gateway>>) -> Result<Json<Vec<ScenarioSummary>>, ApiError> {
    let gw2 = gw.clone();
    let records = tokio::task::spawn_blocking(move || gw2.mission_records())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "mission_log_unreadable", e.to_string()))?;
    Ok(Json(summarize(&records)))
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    version: &'static str,
    provider: String,
    mock: bool,
}

async fn healthz(State(gw): State<Arc<Gateway>>) -> Json<Health> {
    Json(Health { status: "ok", version: VERSION, provider: gw.grounder.provider().id(), mock: gw.mock })
}
