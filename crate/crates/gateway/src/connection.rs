use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use futures_util::{SinkExt, StreamExt};
use tokio::sync::mpsc;
use tracecloud_core::channel::encode_event_message_into;
use tracecloud_core::frame::MSG_EVENT_BATCH;
use tracecloud_core::varint::Reader;
use tracecloud_core::{
    channel::session_key, decode_frame, encode_frame, ChannelMessage, Frame, InterruptCode, ResponseStatus, Topics,
};

use crate::metrics::Metrics;
use crate::registry::Registration;
use crate::{now_ms, Shared};

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

pub(crate) async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| serve(shared, socket))
}

async fn serve(shared: Arc<Shared>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();

    let first = tokio::time::timeout(HELLO_TIMEOUT, stream.next()).await;
    let hello = match first {
        Ok(Some(Ok(Message::Binary(bytes)))) => decode_frame(&bytes).ok(),
        _ => None,
    };
    let Some(Frame::Hello { tracer_id, mode }) = hello else {
        Metrics::add(&shared.metrics.protocol_violations, 1);
        tracing::warn!(event = "protocol_violation", "first frame was not HELLO, closing");
        let _ = sink.send(Message::Close(None)).await;
        return;
    };

    let connected_at = now_ms();
    let (tx, mut outbound) = mpsc::unbounded_channel::<Frame>();
    let Some(reg) = shared.registry.register(&tracer_id, mode, connected_at, tx) else {
        Metrics::add(&shared.metrics.connections_rejected, 1);
        tracing::warn!(event = "duplicate_tracer", tracer_id, "tracer id already connected, rejecting");
        let reject = Frame::Response { request_id: 0, status: ResponseStatus::Rejected };
        let _ = sink.send(Message::Binary(encode_frame(&reject).expect("valid frame").into())).await;
        let _ = sink.send(Message::Close(None)).await;
        return;
    };
    Metrics::add(&shared.metrics.connections_accepted, 1);

    let announce = ChannelMessage::new(&tracer_id, connected_at, Frame::Hello { tracer_id: tracer_id.clone(), mode });
    if let Err(e) = publish(&shared, Topics::CONNECTIONS, tracer_id.as_bytes(), &announce) {
        tracing::error!(tracer_id, error = %e, "failed to publish connection event");
    }
    tracing::info!(event = "connected", tracer_id, mode = mode.as_str(), conn_id = reg.conn_id, "tracer connected");

    let writer = tokio::spawn(async move {
        while let Some(frame) = outbound.recv().await {
            let bytes = match encode_frame(&frame) {
                Ok(b) => b,
                Err(e) => {
                    tracing::error!(error = %e, "unencodable outbound frame");
                    continue;
                }
            };
            if sink.send(Message::Binary(bytes.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });

    let mut conn = Conn { shared: &shared, tracer_id: &tracer_id, reg: &reg, scratch: Vec::new(), records: Vec::new() };
    while let Some(msg) = stream.next().await {
        match msg {
            Ok(Message::Binary(bytes)) => conn.ingest(&bytes),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }

    shared.registry.remove(&tracer_id, reg.conn_id);
    writer.abort();
    let active = reg.tracker.lock().active();
    let notice = Frame::Interrupt {
        session_id: active.unwrap_or(0),
        code: InterruptCode::Disconnected,
        detail: "tracer connection closed".into(),
    };
    match publish(&shared, Topics::INTERRUPTS, tracer_id.as_bytes(), &ChannelMessage::new(&tracer_id, now_ms(), notice))
    {
        Ok(()) => Metrics::add(&shared.metrics.interrupts_published, 1),
        Err(e) => tracing::error!(tracer_id, error = %e, "failed to publish disconnect notice"),
    }
    tracing::info!(
        event = "disconnected",
        tracer_id,
        conn_id = reg.conn_id,
        active_session = active,
        "tracer disconnected"
    );
}

fn publish(shared: &Shared, topic: &str, key: &[u8], msg: &ChannelMessage) -> Result<(), String> {
    let value = msg.encode().map_err(|e| e.to_string())?;
    shared.broker.publish(topic, key, &value).map(|_| ()).map_err(|e| e.to_string())
}

struct Conn<'a> {
    shared: &'a Shared,
    tracer_id: &'a str,
    reg: &'a Registration,
    scratch: Vec<u8>,
    records: Vec<([u8; 8], Vec<u8>)>,
}

impl Conn<'_> {
    fn ingest(&mut self, bytes: &[u8]) {
        let m = &self.shared.metrics;
        Metrics::add(&m.frames_in, 1);
        Metrics::add(&m.bytes_in, bytes.len() as u64);
        Metrics::add(&self.reg.counters.frames_in, 1);
        Metrics::add(&self.reg.counters.bytes_in, bytes.len() as u64);
        let received_at = now_ms();

        let frame = match decode_frame(bytes) {
            Ok(f) => f,
            Err(e) => return self.reject_undecodable(bytes, &e.to_string(), received_at),
        };
        match frame {
            Frame::EventBatch { session_id, events, .. } => {
                let n = events.len() as u64;
                Metrics::add(&m.events_in, n);
                Metrics::add(&self.reg.counters.events_in, n);
                self.records.clear();
                for ev in &events {
                    self.scratch.clear();
                    encode_event_message_into(&mut self.scratch, self.tracer_id, received_at, session_id, ev)
                        .expect("decoded event re-encodes");
                    self.records.push((session_key(session_id), self.scratch.clone()));
                }
                match self.shared.broker.publish_batch(Topics::EVENTS, &self.records) {
                    Ok(_) => Metrics::add(&m.events_published, n),
                    Err(e) => {
                        tracing::error!(tracer_id = self.tracer_id, session_id, error = %e, "event publish failed")
                    }
                }
            }
            Frame::Response { request_id, status } => {
                self.reg.tracker.lock().response(request_id, status);
                self.forward(Topics::RESPONSES, Frame::Response { request_id, status }, received_at);
                Metrics::add(&m.responses_published, 1);
            }
            frame @ Frame::Interrupt { .. } => {
                self.forward(Topics::INTERRUPTS, frame, received_at);
                Metrics::add(&m.interrupts_published, 1);
            }
            other => {
                Metrics::add(&m.protocol_violations, 1);
                tracing::warn!(
                    tracer_id = self.tracer_id,
                    msg_type = other.msg_type(),
                    "unexpected frame from tracer dropped"
                );
            }
        }
    }

    fn forward(&self, topic: &str, frame: Frame, received_at: u64) {
        let msg = ChannelMessage::new(self.tracer_id, received_at, frame);
        if let Err(e) = publish(self.shared, topic, self.tracer_id.as_bytes(), &msg) {
            tracing::error!(tracer_id = self.tracer_id, topic, error = %e, "publish failed");
        }
    }

    /// Drops an undecodable frame and reports it on `trace.interrupts`.
    fn reject_undecodable(&self, bytes: &[u8], error: &str, received_at: u64) {
        let m = &self.shared.metrics;
        Metrics::add(&m.decode_errors, 1);
        let (session_id, announced) = match bytes.split_first() {
            Some((&MSG_EVENT_BATCH, payload)) => batch_header(payload).map_or((None, 0), |(s, c)| (Some(s), c)),
            _ => (None, 0),
        };
        if announced > 0 {
            Metrics::add(&m.events_in, announced);
            Metrics::add(&m.events_dropped, announced);
            Metrics::add(&self.reg.counters.events_in, announced);
        }
        let session_id = session_id.or_else(|| self.reg.tracker.lock().active()).unwrap_or(0);
        tracing::warn!(tracer_id = self.tracer_id, session_id, error, "dropping undecodable frame");
        let notice = Frame::Interrupt { session_id, code: InterruptCode::DecodeError, detail: error.to_owned() };
        self.forward(Topics::INTERRUPTS, notice, received_at);
        Metrics::add(&m.interrupts_published, 1);
    }
}

/// Session id and announced event count of a possibly damaged batch payload.
fn batch_header(payload: &[u8]) -> Option<(u64, u64)> {
    let mut r = Reader::new(payload);
    let session_id = r.varint().ok()?;
    let _base = r.varint().ok()?;
    let _first_seq = r.varint().ok()?;
    let count = r.varint().ok()?;
    // Each encoded event takes at least four bytes.
    let plausible = count.min(r.remaining() as u64 / 4);
    Some((session_id, plausible))
}
