use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::sync::{broadcast, Mutex};
use tracecloud_bus::{BusClient, BusError};
use tracecloud_store::{FieldUpdates, SessionRecord, SessionState, SessionStore, StoreError, TraceStore};

use crate::{ServiceConfig, MAX_CAS_RETRIES};

/// Upper bound on hops taken by one `drive` call.
const MAX_HOPS: usize = 8;

pub(crate) struct App {
    pub config: ServiceConfig,
    pub sessions: SessionStore,
    pub traces: TraceStore,
    publisher: Mutex<Option<BusClient>>,
    pub live: broadcast::Sender<Arc<str>>,
    pub counters: Counters,
}

#[derive(Default)]
pub(crate) struct Counters {
    pub events_stored: AtomicU64,
    pub poison_records: AtomicU64,
}

impl Counters {
    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }
}

impl App {
    pub fn new(config: ServiceConfig, sessions: SessionStore, traces: TraceStore) -> Self {
        let (live, _) = broadcast::channel(1024);
        App { config, sessions, traces, publisher: Mutex::new(None), live, counters: Counters::default() }
    }

    /// Runs store work on the blocking pool.
    pub async fn blocking<T, F>(self: &Arc<Self>, f: F) -> T
    where
        T: Send + 'static,
        F: FnOnce(&App) -> T + Send + 'static,
    {
        let app = Arc::clone(self);
        tokio::task::spawn_blocking(move || f(&app)).await.expect("store task panicked")
    }

    /// Publishes one record, reconnecting once if the cached connection broke.
    pub async fn publish(&self, topic: &str, key: &[u8], value: &[u8]) -> Result<(), BusError> {
        let mut slot = self.publisher.lock().await;
        for attempt in 0..2 {
            if slot.is_none() {
                *slot = Some(BusClient::connect(&self.config.bus_addr).await?);
            }
            let client = slot.as_mut().expect("connected above");
            match client.publish(topic, key, value).await {
                Ok(_) => return Ok(()),
                Err(e @ (BusError::Io(_) | BusError::Disconnected)) if attempt == 0 => {
                    tracing::warn!(error = %e, "bus publisher reconnecting");
                    *slot = None;
                }
                Err(e) => {
                    *slot = None;
                    return Err(e);
                }
            }
        }
        Err(BusError::Disconnected)
    }
}

/// Applies one explicit edge, re-reading the version on conflict.
pub(crate) fn transition(
    sessions: &SessionStore,
    session_id: u64,
    to: SessionState,
    updates: FieldUpdates,
) -> Result<SessionRecord, StoreError> {
    let mut last = None;
    for _ in 0..=MAX_CAS_RETRIES {
        let cur = sessions.get(session_id)?;
        match sessions.cas_transition(session_id, cur.state_version, to, updates.clone()) {
            Err(e @ StoreError::VersionConflict { .. }) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("loop ran at least once"))
}

/// Repeatedly asks `next` for the edge to take from the current record and
/// applies it, until `next` returns `None`. Returns the final record.
pub(crate) fn drive(
    sessions: &SessionStore,
    session_id: u64,
    mut next: impl FnMut(&SessionRecord) -> Option<(SessionState, FieldUpdates)>,
) -> Result<SessionRecord, StoreError> {
    let mut conflicts = 0;
    for _ in 0..MAX_HOPS + MAX_CAS_RETRIES {
        let cur = sessions.get(session_id)?;
        let Some((to, updates)) = next(&cur) else { return Ok(cur) };
        match sessions.cas_transition(session_id, cur.state_version, to, updates) {
            Ok(rec) => {
                tracing::info!(session_id, from = cur.state.as_str(), to = rec.state.as_str(), "session transition");
            }
            Err(e @ StoreError::VersionConflict { .. }) => {
                conflicts += 1;
                if conflicts > MAX_CAS_RETRIES {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
    }
    sessions.get(session_id)
}
