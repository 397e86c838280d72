use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::response::sse::{Event, KeepAlive, Sse};
use futures_util::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use tracecloud_store::{now_micros, SessionState, StoreError};

use crate::api::{ApiError, ApiSession, ApiTracer};
use crate::app::App;

const WATCH_INTERVAL: Duration = Duration::from_millis(250);
const RATE_INTERVAL: Duration = Duration::from_secs(1);

/// One message on `GET /live`. Every SSE `data` field holds one of these as
/// JSON, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LiveMessage {
    /// Sent first on every stream and again after the client fell behind.
    Snapshot {
        sessions: Vec<ApiSession>,
        tracers: Vec<ApiTracer>,
    },
    Session {
        session: ApiSession,
    },
    Interrupt {
        session_id: u64,
        tracer_id: String,
        state: SessionState,
        error_detail: Option<String>,
    },
    /// Stored events per second over the last sample period.
    Rate {
        session_id: u64,
        event_count: u64,
        rate_eps: f64,
        at_us: u64,
    },
    Tracer {
        tracer: ApiTracer,
    },
    DecodeErrors {
        total: u64,
    },
}

impl LiveMessage {
    fn to_json(&self) -> Arc<str> {
        serde_json::to_string(self).expect("live message serializes").into()
    }
}

/// Last observed store contents, diffed against on every tick.
struct Watcher {
    sessions: HashMap<u64, (u64, SessionState)>,
    tracers: HashMap<String, ApiTracer>,
    decode_errors: u64,
    rate_base: HashMap<u64, u64>,
    rate_at: Instant,
}

/// Polls the stores and broadcasts the differences. Runs even without
/// listeners so that a new client's snapshot is never newer than the
/// baseline diffs are computed against.
pub(crate) async fn run(app: Arc<App>) {
    let mut tick = tokio::time::interval(WATCH_INTERVAL);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut watcher: Option<Watcher> = None;
    loop {
        tick.tick().await;
        let prev = watcher.take();
        match app.blocking(move |app| step(app, prev)).await {
            Ok((next, messages)) => {
                watcher = Some(next);
                for m in messages {
                    let _ = app.live.send(m.to_json());
                }
            }
            Err(e) => tracing::warn!(error = %e, "live feed poll failed"),
        }
    }
}

fn step(app: &App, prev: Option<Watcher>) -> Result<(Watcher, Vec<LiveMessage>), StoreError> {
    let sessions = app.sessions.list()?;
    let tracers: Vec<ApiTracer> = app.sessions.tracers()?.into_iter().map(ApiTracer::from).collect();
    let decode_errors = app.sessions.counter("decode_errors")?;
    let now = Instant::now();
    let mut out = Vec::new();

    let Some(prev) = prev else {
        let watcher = Watcher {
            sessions: sessions.iter().map(|s| (s.session_id, (s.state_version, s.state))).collect(),
            tracers: tracers.into_iter().map(|t| (t.tracer_id.clone(), t)).collect(),
            decode_errors,
            rate_base: sessions.iter().map(|s| (s.session_id, s.event_count)).collect(),
            rate_at: now,
        };
        return Ok((watcher, out));
    };

    for s in &sessions {
        let changed = prev.sessions.get(&s.session_id).is_none_or(|&(v, _)| v != s.state_version);
        if !changed {
            continue;
        }
        if matches!(s.state, SessionState::Interrupted | SessionState::Failed) {
            out.push(LiveMessage::Interrupt {
                session_id: s.session_id,
                tracer_id: s.tracer_id.clone(),
                state: s.state,
                error_detail: s.error_detail.clone(),
            });
        }
        out.push(LiveMessage::Session { session: s.clone().into() });
    }
    for t in &tracers {
        if prev.tracers.get(&t.tracer_id) != Some(t) {
            out.push(LiveMessage::Tracer { tracer: t.clone() });
        }
    }
    if decode_errors > prev.decode_errors {
        out.push(LiveMessage::DecodeErrors { total: decode_errors });
    }

    let (rate_base, rate_at) = if now.duration_since(prev.rate_at) >= RATE_INTERVAL {
        let secs = now.duration_since(prev.rate_at).as_secs_f64();
        let at_us = now_micros();
        for s in &sessions {
            let before = prev.rate_base.get(&s.session_id).copied().unwrap_or(0);
            if s.state.is_terminal() && before == s.event_count {
                continue;
            }
            out.push(LiveMessage::Rate {
                session_id: s.session_id,
                event_count: s.event_count,
                rate_eps: s.event_count.saturating_sub(before) as f64 / secs,
                at_us,
            });
        }
        (sessions.iter().map(|s| (s.session_id, s.event_count)).collect(), now)
    } else {
        (prev.rate_base, prev.rate_at)
    };

    let watcher = Watcher {
        sessions: sessions.iter().map(|s| (s.session_id, (s.state_version, s.state))).collect(),
        tracers: tracers.into_iter().map(|t| (t.tracer_id.clone(), t)).collect(),
        decode_errors,
        rate_base,
        rate_at,
    };
    Ok((watcher, out))
}

async fn snapshot(app: &Arc<App>) -> Result<Arc<str>, StoreError> {
    app.blocking(|app| {
        let sessions = app.sessions.list()?.into_iter().map(ApiSession::from).collect();
        let tracers = app.sessions.tracers()?.into_iter().map(ApiTracer::from).collect();
        Ok(LiveMessage::Snapshot { sessions, tracers }.to_json())
    })
    .await
}

pub(crate) async fn handler(
    State(app): State<Arc<App>>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let rx = app.live.subscribe();
    let first = snapshot(&app).await?;
    let stream = futures_util::stream::unfold((app, rx, Some(first)), |(app, mut rx, pending)| async move {
        if let Some(msg) = pending {
            return Some((Ok(Event::default().data(&*msg)), (app, rx, None)));
        }
        loop {
            match rx.recv().await {
                Ok(msg) => return Some((Ok(Event::default().data(&*msg)), (app, rx, None))),
                Err(RecvError::Lagged(missed)) => {
                    tracing::debug!(missed, "live client lagged, resending snapshot");
                    if let Ok(snap) = snapshot(&app).await {
                        return Some((Ok(Event::default().data(&*snap)), (app, rx, None)));
                    }
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
