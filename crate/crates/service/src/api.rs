use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tracecloud_core::{ChannelMessage, Frame, Topics, TraceEvent};
use tracecloud_store::{
    now_micros, FieldUpdates, RequestAction, SessionRecord, SessionState, SessionStats, StoreError, TracerInfo,
};

use crate::app::{transition, App};
use crate::live;

pub const DEFAULT_EVENTS_LIMIT: usize = 1000;
pub const MAX_EVENTS_LIMIT: usize = 100_000;

/// Session as served by the API. Times are wall-clock microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSession {
    pub session_id: u64,
    pub tracer_id: String,
    pub state: SessionState,
    pub state_version: u64,
    pub created_at_us: u64,
    pub started_at_us: Option<u64>,
    pub completed_at_us: Option<u64>,
    pub first_event_at_us: Option<u64>,
    pub last_event_at_us: Option<u64>,
    pub event_count: u64,
    pub processing_time_ms: Option<f64>,
    pub error_detail: Option<String>,
}

impl From<SessionRecord> for ApiSession {
    fn from(r: SessionRecord) -> Self {
        ApiSession {
            processing_time_ms: r.processing_time().map(|d| d.as_secs_f64() * 1e3),
            session_id: r.session_id,
            tracer_id: r.tracer_id,
            state: r.state,
            state_version: r.state_version,
            created_at_us: r.created_at,
            started_at_us: r.started_at,
            completed_at_us: r.completed_at,
            first_event_at_us: r.first_event_at,
            last_event_at_us: r.last_event_at,
            event_count: r.event_count,
            error_detail: r.error_detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiTracer {
    pub tracer_id: String,
    pub mode: String,
    pub connected: bool,
    pub connected_at_us: u64,
}

impl From<TracerInfo> for ApiTracer {
    fn from(t: TracerInfo) -> Self {
        ApiTracer { tracer_id: t.tracer_id, mode: t.mode, connected: t.connected, connected_at_us: t.connected_at }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRow {
    pub seq: u64,
    pub timestamp_ticks: u64,
    pub kind: String,
    pub actor_id: u32,
    pub arg: Option<u32>,
}

impl From<&TraceEvent> for EventRow {
    fn from(e: &TraceEvent) -> Self {
        EventRow {
            seq: e.seq,
            timestamp_ticks: e.timestamp_ticks,
            kind: e.kind.name().to_owned(),
            actor_id: e.actor_id,
            arg: e.arg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventsPage {
    pub session_id: u64,
    pub count: usize,
    pub events: Vec<EventRow>,
}

#[derive(Debug, Serialize)]
struct StatsBody {
    session_id: u64,
    #[serde(flatten)]
    stats: SessionStats,
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    tracer_id: String,
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    from: Option<u64>,
    to: Option<u64>,
    limit: Option<usize>,
}

/// Error body: `{"error": <message>, "code": <machine-readable kind>}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, code) = match &e {
            StoreError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            StoreError::UnknownTracer(_) => (StatusCode::NOT_FOUND, "unknown_tracer"),
            StoreError::TracerBusy { .. } => (StatusCode::CONFLICT, "tracer_busy"),
            StoreError::IllegalTransition { .. } => (StatusCode::CONFLICT, "illegal_transition"),
            StoreError::VersionConflict { .. } => (StatusCode::CONFLICT, "version_conflict"),
            StoreError::NoEvents(_) => (StatusCode::CONFLICT, "no_events"),
            StoreError::InvalidEvents(_) => (StatusCode::BAD_REQUEST, "invalid_events"),
            StoreError::Corrupt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt"),
            StoreError::Sqlite(_) | StoreError::Io(_) => (StatusCode::SERVICE_UNAVAILABLE, "store_unavailable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "code": self.code });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub(crate) fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/tracers", get(list_tracers))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/start", post(start_session))
        .route("/sessions/{id}/stop", post(stop_session))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/stats", get(session_stats))
        .route("/live", get(live::handler))
        .with_state(app)
}

async fn list_tracers(State(app): State<Arc<App>>) -> ApiResult<Json<Vec<ApiTracer>>> {
    let tracers = app.blocking(|app| app.sessions.tracers()).await?;
    Ok(Json(tracers.into_iter().map(ApiTracer::from).collect()))
}

async fn list_sessions(State(app): State<Arc<App>>) -> ApiResult<Json<Vec<ApiSession>>> {
    let sessions = app.blocking(|app| app.sessions.list()).await?;
    Ok(Json(sessions.into_iter().map(ApiSession::from).collect()))
}

async fn create_session(
    State(app): State<Arc<App>>,
    Json(body): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<ApiSession>)> {
    let rec = app
        .blocking(move |app| {
            let rec = app.sessions.create_session(&body.tracer_id, now_micros())?;
            app.traces.create_session(rec.session_id)?;
            Ok::<_, StoreError>(rec)
        })
        .await?;
    tracing::info!(session_id = rec.session_id, tracer_id = rec.tracer_id, "session created");
    Ok((StatusCode::CREATED, Json(rec.into())))
}

async fn get_session(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<Json<ApiSession>> {
    let rec = app.blocking(move |app| app.sessions.get(id)).await?;
    Ok(Json(rec.into()))
}

async fn start_session(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<Json<ApiSession>> {
    command(app, id, RequestAction::Start).await.map(Json)
}

async fn stop_session(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<Json<ApiSession>> {
    command(app, id, RequestAction::Stop).await.map(Json)
}

/// Moves the session to STARTING or STOPPING, records the command and
/// publishes it on `trace.requests`.
async fn command(app: Arc<App>, id: u64, action: RequestAction) -> ApiResult<ApiSession> {
    let (rec, req) = app
        .blocking(move |app| {
            let now = now_micros();
            let (to, updates) = match action {
                RequestAction::Start => (SessionState::Starting, FieldUpdates::started(now)),
                RequestAction::Stop => (SessionState::Stopping, FieldUpdates::default()),
            };
            let rec = transition(&app.sessions, id, to, updates)?;
            let req = app.sessions.new_request(id, &rec.tracer_id, action, now)?;
            Ok::<_, StoreError>((rec, req))
        })
        .await?;

    let frame = match action {
        RequestAction::Start => Frame::StartTrace { request_id: req.request_id, session_id: id },
        RequestAction::Stop => Frame::StopTrace { request_id: req.request_id, session_id: id },
    };
    let msg = ChannelMessage::new(&rec.tracer_id, req.created_at / 1000, frame);
    let value = msg.encode().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encode", e.to_string()))?;
    if let Err(e) = app.publish(Topics::REQUESTS, rec.tracer_id.as_bytes(), &value).await {
        tracing::error!(session_id = id, error = %e, "command publish failed");
        if action == RequestAction::Start {
            let detail = format!("start command not published: {e}");
            let failed = app
                .blocking(move |app| {
                    transition(&app.sessions, id, SessionState::Failed, FieldUpdates::failed(now_micros(), detail))
                })
                .await;
            if let Err(fe) = failed {
                tracing::warn!(session_id = id, error = %fe, "could not mark session failed");
            }
        }
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "bus_unavailable", e.to_string()));
    }
    tracing::info!(session_id = id, request_id = req.request_id, action = action.as_str(), "command published");
    Ok(rec.into())
}

async fn session_events(
    State(app): State<Arc<App>>,
    Path(id): Path<u64>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Json<EventsPage>> {
    let from = q.from.unwrap_or(0);
    let to = q.to.unwrap_or(u64::MAX);
    if from > to {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_range", format!("from {from} is after to {to}")));
    }
    let limit = q.limit.unwrap_or(DEFAULT_EVENTS_LIMIT).min(MAX_EVENTS_LIMIT);
    let events = app
        .blocking(move |app| {
            app.sessions.get(id)?;
            if !app.traces.exists(id) {
                return Ok(Vec::new());
            }
            app.traces.query_events(id, from, to, limit)
        })
        .await?;
    let events: Vec<EventRow> = events.iter().map(EventRow::from).collect();
    Ok(Json(EventsPage { session_id: id, count: events.len(), events }))
}

async fn session_stats(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<Json<StatsBody>> {
    let stats = app.blocking(move |app| app.sessions.get(id)?.stats()).await?;
    Ok(Json(StatsBody { session_id: id, stats }))
}
