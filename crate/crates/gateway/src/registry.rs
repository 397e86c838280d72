use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use tokio::sync::mpsc;
use tracecloud_core::{Frame, ResponseStatus, TracerMode};

/// Per-connection traffic counters.
#[derive(Debug, Default)]
pub struct ConnCounters {
    pub frames_in: AtomicU64,
    pub events_in: AtomicU64,
    pub bytes_in: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Start,
    Stop,
}

/// Which session, if any, is running on a tracer, inferred from the
/// commands routed to it and the responses it sends back.
///
/// A START request is answered twice on success: once when accepted and
/// once when the replay finishes.
#[derive(Debug, Default)]
pub struct SessionTracker {
    pending: HashMap<u64, (u64, Action, u8)>,
    active: Option<u64>,
}

impl SessionTracker {
    pub fn active(&self) -> Option<u64> {
        self.active
    }

    pub fn start_routed(&mut self, request_id: u64, session_id: u64) {
        self.pending.insert(request_id, (session_id, Action::Start, 0));
        if self.active.is_none() {
            self.active = Some(session_id);
        }
    }

    pub fn stop_routed(&mut self, request_id: u64, session_id: u64) {
        self.pending.insert(request_id, (session_id, Action::Stop, 0));
    }

    pub fn response(&mut self, request_id: u64, status: ResponseStatus) {
        let Some(entry) = self.pending.get_mut(&request_id) else { return };
        let (session_id, action) = (entry.0, entry.1);
        let finished = match (action, status) {
            (_, ResponseStatus::Rejected) => true,
            (Action::Start, ResponseStatus::Ok) => {
                entry.2 += 1;
                entry.2 >= 2
            }
            (Action::Stop, ResponseStatus::Ok) => true,
        };
        if !finished {
            return;
        }
        self.pending.remove(&request_id);
        let ends_session = match (action, status) {
            (Action::Start, _) => true,
            (Action::Stop, ResponseStatus::Ok) => true,
            (Action::Stop, ResponseStatus::Rejected) => false,
        };
        if ends_session && self.active == Some(session_id) {
            self.active = None;
            self.pending.retain(|_, (sid, _, _)| *sid != session_id);
        }
    }
}

struct Entry {
    conn_id: u64,
    mode: TracerMode,
    connected_at_ms: u64,
    outbound: mpsc::UnboundedSender<Frame>,
    counters: Arc<ConnCounters>,
    tracker: Arc<Mutex<SessionTracker>>,
}

/// Handle returned to a connection on successful registration.
pub struct Registration {
    pub conn_id: u64,
    pub counters: Arc<ConnCounters>,
    pub tracker: Arc<Mutex<SessionTracker>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracerSnapshot {
    pub tracer_id: String,
    pub mode: TracerMode,
    pub connected_at_ms: u64,
    pub frames_in: u64,
    pub events_in: u64,
    pub bytes_in: u64,
    pub active_session: Option<u64>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum RouteError {
    UnknownTracer,
    NotACommand,
}

/// Live tracer connections, at most one per tracer id.
#[derive(Default)]
pub struct Registry {
    entries: Mutex<HashMap<String, Entry>>,
    next_conn: AtomicU64,
}

impl Registry {
    /// Registers a connection; `None` if the id is already connected.
    pub fn register(
        &self,
        tracer_id: &str,
        mode: TracerMode,
        connected_at_ms: u64,
        outbound: mpsc::UnboundedSender<Frame>,
    ) -> Option<Registration> {
        let mut entries = self.entries.lock();
        if entries.contains_key(tracer_id) {
            return None;
        }
        let conn_id = self.next_conn.fetch_add(1, Ordering::Relaxed) + 1;
        let counters = Arc::new(ConnCounters::default());
        let tracker = Arc::new(Mutex::new(SessionTracker::default()));
        entries.insert(
            tracer_id.to_owned(),
            Entry { conn_id, mode, connected_at_ms, outbound, counters: counters.clone(), tracker: tracker.clone() },
        );
        Some(Registration { conn_id, counters, tracker })
    }

    /// Removes the entry if it still belongs to `conn_id`.
    pub fn remove(&self, tracer_id: &str, conn_id: u64) -> bool {
        let mut entries = self.entries.lock();
        if entries.get(tracer_id).is_some_and(|e| e.conn_id == conn_id) {
            entries.remove(tracer_id);
            true
        } else {
            false
        }
    }

    /// Sends a START/STOP frame to the tracer's connection.
    pub fn route(&self, tracer_id: &str, frame: Frame) -> Result<(), RouteError> {
        let entries = self.entries.lock();
        let entry = entries.get(tracer_id).ok_or(RouteError::UnknownTracer)?;
        match frame {
            Frame::StartTrace { request_id, session_id } => entry.tracker.lock().start_routed(request_id, session_id),
            Frame::StopTrace { request_id, session_id } => entry.tracker.lock().stop_routed(request_id, session_id),
            _ => return Err(RouteError::NotACommand),
        }
        entry.outbound.send(frame).map_err(|_| RouteError::UnknownTracer)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<TracerSnapshot> {
        let entries = self.entries.lock();
        let mut out: Vec<_> = entries
            .iter()
            .map(|(id, e)| TracerSnapshot {
                tracer_id: id.clone(),
                mode: e.mode,
                connected_at_ms: e.connected_at_ms,
                frames_in: e.counters.frames_in.load(Ordering::Relaxed),
                events_in: e.counters.events_in.load(Ordering::Relaxed),
                bytes_in: e.counters.bytes_in.load(Ordering::Relaxed),
                active_session: e.tracker.lock().active(),
            })
            .collect();
        out.sort_by(|a, b| a.tracer_id.cmp(&b.tracer_id));
        out
    }
}
