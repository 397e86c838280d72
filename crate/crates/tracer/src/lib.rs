//! Emulated target tracer.
//!
//! A tracer holds one recording in memory, connects to the device gateway,
//! announces itself with HELLO and then waits for commands. Each
//! START_TRACE replays the whole recording as EVENT_BATCH frames, either as
//! fast as the connection accepts them or paced to a target event rate.
//!
//! Responses sent for a session started by request `r`:
//!
//! * `RESPONSE(r, ok)` when the START is accepted;
//! * `RESPONSE(r, ok)` again after the last event has been sent;
//! * `RESPONSE(s, ok)` instead of the above when STOP request `s` ended the
//!   replay early.
//!
//! Request id 0 is reserved for the gateway's rejection of a HELLO.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use parking_lot::Mutex;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};
use tracecloud_core::frame::encode_event_batch_frame_into;
use tracecloud_core::{decode_frame, encode_frame, Frame, ResponseStatus, TraceEvent, TracerMode};

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_PACED_RATE_EPS: f64 = 3_200.0;
/// Byte rate that models the debug-probe transfer ceiling.
pub const RTT_RATE_CAP_BYTES_PER_S: u64 = 2_000_000;

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;
type WsSink = futures_util::stream::SplitSink<Ws, Message>;

#[derive(Debug, Error)]
pub enum TracerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not connect to {url} after {attempts} attempts: {last}")]
    ConnectFailed { url: String, attempts: u32, last: String },
    #[error("gateway rejected tracer id {0:?}")]
    DuplicateTracerId(String),
    #[error("connection lost during session {session_id} after {events_sent} events")]
    ConnectionLost { session_id: u64, events_sent: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Reconnect schedule: `initial`, doubling per attempt, capped at `max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { initial: Duration::from_millis(500), max: Duration::from_secs(30) }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(31)).unwrap_or(u32::MAX);
        self.initial.saturating_mul(factor).min(self.max)
    }
}

#[derive(Debug, Clone)]
pub struct TracerConfig {
    pub tracer_id: String,
    /// WebSocket URL of the gateway, e.g. `ws://127.0.0.1:9000/tracer`.
    pub gateway_url: String,
    pub mode: TracerMode,
    pub paced_rate_eps: f64,
    pub batch_size: usize,
    pub rate_cap_bytes_per_s: Option<u64>,
    pub backoff: Backoff,
    /// Give up after this many failed connection attempts in a row.
    pub max_connect_attempts: Option<u32>,
    /// Disconnect and return after this many sessions.
    pub max_sessions: Option<usize>,
}

impl TracerConfig {
    pub fn new(tracer_id: impl Into<String>, gateway_url: impl Into<String>, mode: TracerMode) -> Self {
        TracerConfig {
            tracer_id: tracer_id.into(),
            gateway_url: gateway_url.into(),
            mode,
            paced_rate_eps: DEFAULT_PACED_RATE_EPS,
            batch_size: DEFAULT_BATCH_SIZE,
            rate_cap_bytes_per_s: None,
            backoff: Backoff::default(),
            max_connect_attempts: None,
            max_sessions: None,
        }
    }

    pub fn validate(&self) -> Result<(), TracerError> {
        if self.tracer_id.is_empty() {
            return Err(TracerError::Config("tracer id must not be empty".into()));
        }
        if self.batch_size == 0 {
            return Err(TracerError::Config("batch size must be at least 1".into()));
        }
        if self.mode == TracerMode::Paced && !(self.paced_rate_eps > 0.0 && self.paced_rate_eps.is_finite()) {
            return Err(TracerError::Config("paced rate must be positive".into()));
        }
        if self.rate_cap_bytes_per_s == Some(0) {
            return Err(TracerError::Config("rate cap must be positive".into()));
        }
        Ok(())
    }
}

/// Counters observable while a tracer runs.
#[derive(Debug, Default)]
pub struct TracerMetrics {
    pub events_sent: AtomicU64,
    pub batches_sent: AtomicU64,
    pub bytes_sent: AtomicU64,
    /// Sleeps inserted by pacing or the byte-rate cap.
    pub intentional_delays: AtomicU64,
    pub sessions_completed: AtomicU64,
    connect_attempts: Mutex<Vec<Instant>>,
}

impl TracerMetrics {
    pub fn connect_attempts(&self) -> Vec<Instant> {
        self.connect_attempts.lock().clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionRunReport {
    pub session_id: u64,
    pub events_sent: u64,
    pub duration: Duration,
    /// Ended by STOP_TRACE rather than by reaching the end of the recording.
    pub stopped: bool,
}

#[derive(Debug)]
enum Command {
    Start { request_id: u64, session_id: u64 },
    Stop { request_id: u64, session_id: u64 },
    HelloRejected,
}

enum ConnectionEnd {
    /// Session limit reached; the connection was closed by us.
    Finished,
    /// The gateway went away while no session was running.
    LostIdle,
}

pub struct Tracer {
    config: TracerConfig,
    events: Arc<[TraceEvent]>,
    metrics: Arc<TracerMetrics>,
    reports: Vec<SessionRunReport>,
}

impl Tracer {
    /// `events` must carry seq `0..n` and non-decreasing timestamps.
    pub fn new(config: TracerConfig, events: impl Into<Arc<[TraceEvent]>>) -> Result<Self, TracerError> {
        config.validate()?;
        let events = events.into();
        if let Some(i) = events.iter().enumerate().position(|(i, e)| e.seq != i as u64) {
            return Err(TracerError::Config(format!("recording seq is not 0..n at index {i}")));
        }
        if events.windows(2).any(|w| w[1].timestamp_ticks < w[0].timestamp_ticks) {
            return Err(TracerError::Config("recording timestamps decrease".into()));
        }
        Ok(Tracer { config, events, metrics: Arc::default(), reports: Vec::new() })
    }

    pub fn metrics(&self) -> Arc<TracerMetrics> {
        self.metrics.clone()
    }

    /// Runs until the session limit is reached or an unrecoverable error.
    /// Returns reports of all sessions served.
    pub async fn run(mut self) -> Result<Vec<SessionRunReport>, TracerError> {
        loop {
            let ws = self.connect().await?;
            match self.serve(ws).await? {
                ConnectionEnd::Finished => return Ok(self.reports),
                ConnectionEnd::LostIdle => {
                    tracing::warn!(tracer = %self.config.tracer_id, "gateway connection lost, reconnecting");
                }
            }
        }
    }

    async fn connect(&self) -> Result<Ws, TracerError> {
        let mut retry = 0u32;
        loop {
            self.metrics.connect_attempts.lock().push(Instant::now());
            match tokio_tungstenite::connect_async_with_config(self.config.gateway_url.as_str(), None, true).await {
                Ok((ws, _)) => return Ok(ws),
                Err(e) => {
                    let attempts = retry + 1;
                    if self.config.max_connect_attempts.is_some_and(|max| attempts >= max) {
                        return Err(TracerError::ConnectFailed {
                            url: self.config.gateway_url.clone(),
                            attempts,
                            last: e.to_string(),
                        });
                    }
                    let delay = self.config.backoff.delay(retry);
                    tracing::info!(tracer = %self.config.tracer_id, error = %e, ?delay, "connect failed");
                    tokio::time::sleep(delay).await;
                    retry += 1;
                }
            }
        }
    }

    async fn serve(&mut self, ws: Ws) -> Result<ConnectionEnd, TracerError> {
        let (mut sink, mut stream) = ws.split();
        let hello = Frame::Hello { tracer_id: self.config.tracer_id.clone(), mode: self.config.mode };
        send_frame(&mut sink, &hello).await.map_err(|_| TracerError::Protocol("HELLO not delivered".into()))?;

        let (tx, mut commands) = mpsc::unbounded_channel();
        let reader = tokio::spawn(async move {
            while let Some(Ok(msg)) = stream.next().await {
                let Message::Binary(bytes) = msg else { continue };
                let cmd = match decode_frame(&bytes) {
                    Ok(Frame::StartTrace { request_id, session_id }) => Command::Start { request_id, session_id },
                    Ok(Frame::StopTrace { request_id, session_id }) => Command::Stop { request_id, session_id },
                    Ok(Frame::Response { request_id: 0, status: ResponseStatus::Rejected }) => Command::HelloRejected,
                    Ok(other) => {
                        tracing::warn!(msg_type = other.msg_type(), "ignoring unexpected frame");
                        continue;
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "ignoring undecodable frame");
                        continue;
                    }
                };
                if tx.send(cmd).is_err() {
                    break;
                }
            }
        });
        let _reader = AbortOnDrop(reader);

        while let Some(cmd) = commands.recv().await {
            match cmd {
                Command::HelloRejected => return Err(TracerError::DuplicateTracerId(self.config.tracer_id.clone())),
                Command::Stop { request_id, .. } => {
                    respond(&mut sink, request_id, ResponseStatus::Rejected).await?;
                }
                Command::Start { request_id, session_id } => {
                    let report = self.run_session(&mut sink, &mut commands, request_id, session_id).await?;
                    tracing::info!(
                        tracer = %self.config.tracer_id,
                        session_id,
                        events = report.events_sent,
                        ms = report.duration.as_millis() as u64,
                        stopped = report.stopped,
                        "session finished"
                    );
                    self.reports.push(report);
                    self.metrics.sessions_completed.fetch_add(1, Ordering::Relaxed);
                    if self.config.max_sessions.is_some_and(|max| self.reports.len() >= max) {
                        let _ = sink.send(Message::Close(None)).await;
                        return Ok(ConnectionEnd::Finished);
                    }
                }
            }
        }
        Ok(ConnectionEnd::LostIdle)
    }

    async fn run_session(
        &self,
        sink: &mut WsSink,
        commands: &mut mpsc::UnboundedReceiver<Command>,
        start_request: u64,
        session_id: u64,
    ) -> Result<SessionRunReport, TracerError> {
        let lost = |events_sent| TracerError::ConnectionLost { session_id, events_sent };
        respond(sink, start_request, ResponseStatus::Ok).await.map_err(|_| lost(0))?;

        let started = Instant::now();
        let batch_size = self.config.batch_size;
        let paced = self.config.mode == TracerMode::Paced;
        let mut buf = Vec::with_capacity(batch_size * 8 + 32);
        let mut sent = 0usize;
        let mut bytes = 0u64;
        let mut prev_ts = 0u64;
        let mut stop_request = None;

        while sent < self.events.len() {
            loop {
                match commands.try_recv() {
                    Ok(Command::Stop { request_id, session_id: sid }) if sid == session_id => {
                        stop_request = Some(request_id);
                    }
                    Ok(Command::Stop { request_id, .. } | Command::Start { request_id, .. }) => {
                        respond(sink, request_id, ResponseStatus::Rejected).await.map_err(|_| lost(sent as u64))?;
                    }
                    Ok(Command::HelloRejected) => {}
                    Err(mpsc::error::TryRecvError::Empty) => break,
                    Err(mpsc::error::TryRecvError::Disconnected) => return Err(lost(sent as u64)),
                }
            }
            if stop_request.is_some() {
                break;
            }

            let mut due = None;
            if paced {
                due = Some(started + Duration::from_secs_f64(sent as f64 / self.config.paced_rate_eps));
            }
            if let Some(cap) = self.config.rate_cap_bytes_per_s {
                let at = started + Duration::from_secs_f64(bytes as f64 / cap as f64);
                due = Some(due.map_or(at, |d: Instant| d.max(at)));
            }
            if let Some(due) = due.filter(|d| *d > Instant::now()) {
                self.metrics.intentional_delays.fetch_add(1, Ordering::Relaxed);
                tokio::time::sleep_until(due.into()).await;
            }

            let batch = &self.events[sent..(sent + batch_size).min(self.events.len())];
            buf.clear();
            encode_event_batch_frame_into(&mut buf, session_id, prev_ts, batch)
                .map_err(|e| TracerError::Protocol(e.to_string()))?;
            bytes += buf.len() as u64;
            sink.send(Message::Binary(buf.clone().into())).await.map_err(|_| lost(sent as u64))?;
            sent += batch.len();
            prev_ts = batch[batch.len() - 1].timestamp_ticks;
            self.metrics.events_sent.fetch_add(batch.len() as u64, Ordering::Relaxed);
            self.metrics.batches_sent.fetch_add(1, Ordering::Relaxed);
            self.metrics.bytes_sent.fetch_add(buf.len() as u64, Ordering::Relaxed);
        }

        let final_request = stop_request.unwrap_or(start_request);
        respond(sink, final_request, ResponseStatus::Ok).await.map_err(|_| lost(sent as u64))?;
        Ok(SessionRunReport {
            session_id,
            events_sent: sent as u64,
            duration: started.elapsed(),
            stopped: stop_request.is_some(),
        })
    }
}

struct AbortOnDrop(tokio::task::JoinHandle<()>);

impl Drop for AbortOnDrop {
    fn drop(&mut self) {
        self.0.abort();
    }
}

async fn send_frame(sink: &mut WsSink, frame: &Frame) -> Result<(), TracerError> {
    let bytes = encode_frame(frame).map_err(|e| TracerError::Protocol(e.to_string()))?;
    sink.send(Message::Binary(bytes.into())).await.map_err(|e| TracerError::Protocol(e.to_string()))
}

async fn respond(sink: &mut WsSink, request_id: u64, status: ResponseStatus) -> Result<(), TracerError> {
    send_frame(sink, &Frame::Response { request_id, status }).await
}
