use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::header;
use axum::response::IntoResponse;

use crate::Shared;

/// Gateway-wide counters.
#[derive(Debug, Default)]
pub struct Metrics {
    pub connections_accepted: AtomicU64,
    pub connections_rejected: AtomicU64,
    pub protocol_violations: AtomicU64,
    pub frames_in: AtomicU64,
    pub bytes_in: AtomicU64,
    /// Events announced by inbound batches, including undecodable ones.
    pub events_in: AtomicU64,
    pub events_published: AtomicU64,
    /// Events in batches dropped because they failed to decode.
    pub events_dropped: AtomicU64,
    pub decode_errors: AtomicU64,
    pub responses_published: AtomicU64,
    pub interrupts_published: AtomicU64,
    pub requests_routed: AtomicU64,
    pub requests_rejected: AtomicU64,
}

impl Metrics {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }

    pub(crate) fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    fn lines(&self) -> [(&'static str, u64); 13] {
        let g = Self::get;
        [
            ("connections_accepted", g(&self.connections_accepted)),
            ("connections_rejected", g(&self.connections_rejected)),
            ("protocol_violations", g(&self.protocol_violations)),
            ("frames_in", g(&self.frames_in)),
            ("bytes_in", g(&self.bytes_in)),
            ("events_in", g(&self.events_in)),
            ("events_published", g(&self.events_published)),
            ("events_dropped", g(&self.events_dropped)),
            ("decode_errors", g(&self.decode_errors)),
            ("responses_published", g(&self.responses_published)),
            ("interrupts_published", g(&self.interrupts_published)),
            ("requests_routed", g(&self.requests_routed)),
            ("requests_rejected", g(&self.requests_rejected)),
        ]
    }
}

pub(crate) fn render(shared: &Shared) -> String {
    let mut out = String::new();
    let tracers = shared.registry.snapshot();
    let _ = writeln!(out, "connections_active {}", tracers.len());
    for (name, value) in shared.metrics.lines() {
        let _ = writeln!(out, "{name} {value}");
    }
    for t in tracers {
        let id = &t.tracer_id;
        let _ = writeln!(out, "tracer_frames_in{{tracer=\"{id}\"}} {}", t.frames_in);
        let _ = writeln!(out, "tracer_events_in{{tracer=\"{id}\"}} {}", t.events_in);
        let _ = writeln!(out, "tracer_bytes_in{{tracer=\"{id}\"}} {}", t.bytes_in);
    }
    out
}

pub(crate) async fn handler(State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "text/plain; version=0.0.4")], render(&shared))
}
