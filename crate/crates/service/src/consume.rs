use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use tokio::task::JoinHandle;
use tracecloud_bus::{BusClient, BusError, ConsumedRecord, RemoteSubscription};
use tracecloud_core::{ChannelMessage, Frame, InterruptCode, ResponseStatus, Topics, TraceEvent};
use tracecloud_store::{now_micros, FieldUpdates, RequestAction, ResponseOrdinal, SessionState, StoreError};

use crate::app::{drive, App, Counters};
use crate::CONSUMER_GROUP;

const POLL_TIMEOUT: Duration = Duration::from_millis(500);
const CONTROL_POLL_MAX: u32 = 256;
const RETRY_DELAY: Duration = Duration::from_millis(200);
const MAX_RECONNECT_DELAY: Duration = Duration::from_secs(2);
const SWEEP_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy)]
enum Kind {
    Events,
    Responses,
    Interrupts,
    Connections,
}

impl Kind {
    fn topic(self) -> &'static str {
        match self {
            Kind::Events => Topics::EVENTS,
            Kind::Responses => Topics::RESPONSES,
            Kind::Interrupts => Topics::INTERRUPTS,
            Kind::Connections => Topics::CONNECTIONS,
        }
    }
}

/// Result of handling one poll: offsets safe to commit, and whether a store
/// failure left records to be redelivered.
#[derive(Default)]
struct Processed {
    commits: BTreeMap<u32, u64>,
    failed: bool,
}

impl Processed {
    fn done(&mut self, rec: &ConsumedRecord) {
        let next = self.commits.entry(rec.partition).or_default();
        *next = (*next).max(rec.offset + 1);
    }
}

pub(crate) fn spawn_all(app: &Arc<App>) -> Vec<JoinHandle<()>> {
    let mut tasks: Vec<JoinHandle<()>> = [Kind::Events, Kind::Responses, Kind::Interrupts, Kind::Connections]
        .into_iter()
        .map(|kind| tokio::spawn(run(app.clone(), kind)))
        .collect();
    tasks.push(tokio::spawn(sweep(app.clone())));
    tasks
}

async fn run(app: Arc<App>, kind: Kind) {
    let mut delay = RETRY_DELAY;
    loop {
        let sub = match subscribe(&app, kind).await {
            Ok(sub) => sub,
            Err(e) => {
                tracing::warn!(topic = kind.topic(), error = %e, "bus subscribe failed, retrying");
                tokio::time::sleep(delay).await;
                delay = (delay * 2).min(MAX_RECONNECT_DELAY);
                continue;
            }
        };
        delay = RETRY_DELAY;
        tracing::info!(topic = kind.topic(), consumer = app.config.instance_id, "joined consumer group");
        if let Err(e) = consume(&app, kind, sub).await {
            tracing::warn!(topic = kind.topic(), error = %e, "consumer lost its subscription, rejoining");
            tokio::time::sleep(RETRY_DELAY).await;
        }
    }
}

async fn subscribe(app: &App, kind: Kind) -> Result<RemoteSubscription, BusError> {
    let client = BusClient::connect(&app.config.bus_addr).await?;
    client.subscribe(kind.topic(), CONSUMER_GROUP, &app.config.instance_id).await
}

async fn consume(app: &Arc<App>, kind: Kind, mut sub: RemoteSubscription) -> Result<(), BusError> {
    let max = match kind {
        Kind::Events => app.config.events_poll_max,
        _ => CONTROL_POLL_MAX,
    };
    loop {
        let records = sub.poll(max, POLL_TIMEOUT).await?;
        if records.is_empty() {
            continue;
        }
        let processed = app
            .blocking(move |app| match kind {
                Kind::Events => handle_events(app, records),
                _ => handle_control(app, kind, records),
            })
            .await;
        for (partition, offset) in processed.commits {
            match sub.commit(partition, offset).await {
                Ok(()) => {}
                Err(e @ BusError::RevokedPartition { .. }) => {
                    tracing::warn!(topic = kind.topic(), error = %e, "commit after rebalance dropped");
                }
                Err(e) => return Err(e),
            }
        }
        if processed.failed {
            tokio::time::sleep(RETRY_DELAY).await;
        }
    }
}

fn count_poison(app: &App, n: u64) {
    if n == 0 {
        return;
    }
    Counters::add(&app.counters.poison_records, n);
    if let Err(e) = app.sessions.add_counter("poison_records", n) {
        tracing::warn!(error = %e, "poison counter not persisted");
    }
}

/// Stores one poll worth of events, grouped by session. All or nothing: on
/// a store failure nothing is committed and the whole poll is redelivered.
fn handle_events(app: &App, records: Vec<ConsumedRecord>) -> Processed {
    let mut out = Processed::default();
    let mut by_session: BTreeMap<u64, Vec<TraceEvent>> = BTreeMap::new();
    let mut poison = 0;
    for rec in &records {
        match ChannelMessage::decode(&rec.value).ok().and_then(ChannelMessage::into_event) {
            Some((session_id, ev)) => by_session.entry(session_id).or_default().push(ev),
            None => {
                tracing::warn!(partition = rec.partition, offset = rec.offset, "skipping poison event record");
                poison += 1;
            }
        }
    }
    for (session_id, events) in by_session {
        match store_events(app, session_id, &events) {
            Ok(()) => {}
            Err(StoreError::UnknownSession(_)) => {
                tracing::warn!(session_id, events = events.len(), "events for unknown session skipped");
                poison += events.len() as u64;
            }
            Err(e) => {
                tracing::error!(session_id, error = %e, "event store failed, batch will be redelivered");
                out.failed = true;
                return out;
            }
        }
    }
    count_poison(app, poison);
    for rec in &records {
        out.done(rec);
    }
    out
}

fn store_events(app: &App, session_id: u64, events: &[TraceEvent]) -> Result<(), StoreError> {
    let rec = app.sessions.get(session_id)?;
    if rec.state == SessionState::Starting {
        drive(&app.sessions, session_id, |r| {
            (r.state == SessionState::Starting).then(|| (SessionState::Active, FieldUpdates::default()))
        })?;
    }
    if !app.traces.exists(session_id) {
        app.traces.create_session(session_id)?;
    }
    let outcome = app.traces.append_events(session_id, events)?;
    if outcome.appended > 0 || rec.event_count < outcome.total {
        let now = now_micros();
        app.sessions.record_progress(session_id, outcome.total, now, now)?;
    }
    Counters::add(&app.counters.events_stored, outcome.appended);
    Ok(())
}

/// Handles control records in order, stopping at the first store failure.
fn handle_control(app: &App, kind: Kind, records: Vec<ConsumedRecord>) -> Processed {
    let mut out = Processed::default();
    for rec in &records {
        let msg = match ChannelMessage::decode(&rec.value) {
            Ok(m) => m,
            Err(e) => {
                tracing::warn!(topic = kind.topic(), offset = rec.offset, error = %e, "skipping poison record");
                count_poison(app, 1);
                out.done(rec);
                continue;
            }
        };
        let res = match (kind, msg.frame) {
            (Kind::Responses, Frame::Response { request_id, status }) => {
                on_response(app, request_id, status, rec.offset)
            }
            (Kind::Interrupts, Frame::Interrupt { session_id, code, detail }) => {
                on_interrupt(app, &msg.tracer_id, msg.received_at_ms, session_id, code, &detail)
            }
            (Kind::Connections, Frame::Hello { tracer_id, mode }) => {
                app.sessions.upsert_tracer(&tracer_id, mode.as_str(), msg.received_at_ms * 1000)
            }
            (_, other) => {
                tracing::warn!(topic = kind.topic(), msg_type = other.msg_type(), "skipping unexpected frame");
                count_poison(app, 1);
                Ok(())
            }
        };
        match res {
            Ok(()) | Err(StoreError::UnknownSession(_) | StoreError::IllegalTransition { .. }) => out.done(rec),
            Err(e) => {
                tracing::error!(topic = kind.topic(), offset = rec.offset, error = %e, "store failed, record will be redelivered");
                out.failed = true;
                break;
            }
        }
    }
    out
}

fn on_response(app: &App, request_id: u64, status: ResponseStatus, offset: u64) -> Result<(), StoreError> {
    let Some((req, ordinal)) = app.sessions.observe_response(request_id, offset)? else {
        tracing::debug!(request_id, "response for unknown request ignored");
        return Ok(());
    };
    use SessionState::*;
    let now = now_micros();
    let sid = req.session_id;
    let s = &app.sessions;
    match (req.action, status, ordinal) {
        (RequestAction::Start, ResponseStatus::Ok, ResponseOrdinal::First) => {
            drive(s, sid, |r| (r.state == Starting).then(|| (Active, FieldUpdates::default())))
        }
        // The second acknowledgement of a START reports the end of the replay.
        (RequestAction::Start, ResponseStatus::Ok, ResponseOrdinal::Subsequent) => drive(s, sid, |r| match r.state {
            Starting => Some((Active, FieldUpdates::default())),
            Active | Stopping => Some((Completed, FieldUpdates::completed(now))),
            _ => None,
        }),
        (RequestAction::Start, ResponseStatus::Rejected, _) => {
            drive(s, sid, |r| (r.state == Starting).then(|| (Failed, FieldUpdates::failed(now, "start rejected"))))
        }
        (RequestAction::Stop, ResponseStatus::Ok, _) => {
            drive(s, sid, |r| (r.state == Stopping).then(|| (Completed, FieldUpdates::completed(now))))
        }
        (RequestAction::Stop, ResponseStatus::Rejected, _) => drive(s, sid, |r| {
            (r.state == Stopping)
                .then(|| (Interrupted, FieldUpdates::failed(now, "stop rejected: tracer is not running the session")))
        }),
    }
    .map(|_| ())
}

fn on_interrupt(
    app: &App,
    tracer_id: &str,
    received_at_ms: u64,
    session_id: u64,
    code: InterruptCode,
    detail: &str,
) -> Result<(), StoreError> {
    if code == InterruptCode::Disconnected {
        app.sessions.mark_tracer_disconnected(tracer_id, received_at_ms * 1000)?;
    }
    if session_id == 0 {
        return Ok(());
    }
    if code == InterruptCode::DecodeError {
        app.sessions.add_counter("decode_errors", 1)?;
        return Ok(());
    }
    let rec = app.sessions.get(session_id)?;
    if rec.tracer_id != tracer_id {
        tracing::warn!(session_id, tracer_id, owner = rec.tracer_id, "interrupt from a foreign tracer ignored");
        return Ok(());
    }
    let now = now_micros();
    let detail = format!("{}: {detail}", code.as_str());
    drive(&app.sessions, session_id, |r| match r.state {
        SessionState::Starting => Some((SessionState::Failed, FieldUpdates::failed(now, detail.clone()))),
        SessionState::Active | SessionState::Stopping => {
            Some((SessionState::Interrupted, FieldUpdates::failed(now, detail.clone())))
        }
        _ => None,
    })
    .map(|_| ())
}

/// Fails sessions whose start command got neither a response nor an event.
async fn sweep(app: Arc<App>) {
    let mut tick = tokio::time::interval(SWEEP_INTERVAL);
    loop {
        tick.tick().await;
        let res = app
            .blocking(|app| -> Result<(), StoreError> {
                let timeout = app.config.start_timeout.as_micros() as u64;
                let now = now_micros();
                for rec in app.sessions.sessions_in_state(SessionState::Starting)? {
                    let started = rec.started_at.unwrap_or(rec.created_at);
                    if now.saturating_sub(started) < timeout {
                        continue;
                    }
                    let detail = format!("no response to start within {} ms", timeout / 1000);
                    drive(&app.sessions, rec.session_id, |r| {
                        (r.state == SessionState::Starting)
                            .then(|| (SessionState::Failed, FieldUpdates::failed(now, detail.clone())))
                    })?;
                }
                Ok(())
            })
            .await;
        if let Err(e) = res {
            tracing::warn!(error = %e, "start timeout sweep failed");
        }
    }
}
