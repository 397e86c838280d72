#![allow(dead_code)]

use std::future::Future;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;
use tokio::net::TcpListener;
use tracecloud_bus::Broker;
use tracecloud_core::{ChannelMessage, EventKind, Frame, Topics, TraceEvent, TracerMode};
use tracecloud_service::{ApiSession, ServiceConfig, ServiceHandle};

pub fn recording(n: u64) -> Vec<TraceEvent> {
    (0..n)
        .map(|i| {
            let ev = TraceEvent::new(i * 315 + (i % 7), i, EventKind::ALL[(i % 6) as usize], (i % 5) as u32);
            if i % 11 == 0 {
                ev.with_arg(i as u32)
            } else {
                ev
            }
        })
        .collect()
}

/// A broker served over TCP with the five topics, without a gateway.
pub struct BareBus {
    pub broker: Arc<Broker>,
    pub addr: String,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for BareBus {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub async fn bare_bus() -> BareBus {
    let broker = Broker::in_memory();
    for (topic, partitions) in Topics::ALL {
        broker.ensure_topic(topic, partitions).unwrap();
    }
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let b = broker.clone();
    let task = tokio::spawn(async move {
        let _ = tracecloud_bus::server::serve(b, listener).await;
    });
    BareBus { broker, addr, task }
}

pub fn publish(broker: &Broker, topic: &str, key: &[u8], msg: ChannelMessage) {
    broker.publish(topic, key, &msg.encode().unwrap()).unwrap();
}

pub fn announce(broker: &Broker, tracer_id: &str) {
    let hello = Frame::Hello { tracer_id: tracer_id.into(), mode: TracerMode::File };
    publish(broker, Topics::CONNECTIONS, tracer_id.as_bytes(), ChannelMessage::new(tracer_id, now_ms(), hello));
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_millis() as u64
}

pub async fn service(bus_addr: &str, data_dir: &Path, instance: &str) -> ServiceHandle {
    let mut config = ServiceConfig::new(bus_addr, data_dir);
    config.instance_id = instance.into();
    tracecloud_service::start(config).await.unwrap()
}

pub struct Api {
    pub base: String,
    pub http: reqwest::Client,
}

impl Api {
    pub fn new(handle: &ServiceHandle) -> Self {
        Api { base: handle.api_url(), http: reqwest::Client::new() }
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let resp = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn session(&self, id: u64) -> ApiSession {
        let (status, body) = self.get(&format!("/sessions/{id}")).await;
        assert_eq!(status, 200, "{body}");
        serde_json::from_value(body).unwrap()
    }

    pub async fn create(&self, tracer_id: &str) -> ApiSession {
        let (status, body) = self.post("/sessions", serde_json::json!({ "tracer_id": tracer_id })).await;
        assert_eq!(status, 201, "{body}");
        serde_json::from_value(body).unwrap()
    }

    /// Polls the session until `pred` holds.
    pub async fn wait_for(&self, id: u64, timeout: Duration, pred: impl Fn(&ApiSession) -> bool) -> ApiSession {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.session(id).await;
            if pred(&s) {
                return s;
            }
            assert!(Instant::now() < deadline, "timed out waiting on session {id}: {s:?}");
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }

    pub async fn wait_tracer(&self, tracer_id: &str) {
        eventually(Duration::from_secs(10), || async {
            let (_, body) = self.get("/tracers").await;
            body.as_array().is_some_and(|a| a.iter().any(|t| t["tracer_id"] == tracer_id))
        })
        .await;
    }
}

pub async fn eventually<F, Fut>(timeout: Duration, mut check: F)
where
    F: FnMut() -> Fut,
    Fut: Future<Output = bool>,
{
    let deadline = Instant::now() + timeout;
    while !check().await {
        assert!(Instant::now() < deadline, "condition not reached within {timeout:?}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

pub fn tempdir() -> TempDir {
    tempfile::tempdir().unwrap()
}

pub fn publish_events(broker: &Broker, tracer_id: &str, session_id: u64, events: &[TraceEvent]) {
    let records: Vec<([u8; 8], Vec<u8>)> = events
        .iter()
        .map(|ev| {
            let mut value = Vec::new();
            tracecloud_core::channel::encode_event_message_into(&mut value, tracer_id, now_ms(), session_id, ev)
                .unwrap();
            (tracecloud_core::channel::session_key(session_id), value)
        })
        .collect();
    broker.publish_batch(Topics::EVENTS, &records).unwrap();
}

/// Every record on `trace.requests` so far, read by a throwaway group.
pub async fn requests(broker: &Arc<Broker>) -> Vec<ChannelMessage> {
    static GROUP: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let group = format!("reader-{}", GROUP.fetch_add(1, std::sync::atomic::Ordering::Relaxed));
    let sub = broker.subscribe(Topics::REQUESTS, &group, "reader").unwrap();
    let mut out = Vec::new();
    loop {
        let recs = sub.poll(1024, Duration::from_millis(100)).await.unwrap();
        if recs.is_empty() {
            return out;
        }
        for r in &recs {
            out.push(ChannelMessage::decode(&r.value).unwrap());
            sub.commit(r.partition, r.offset + 1).unwrap();
        }
    }
}

pub fn respond(broker: &Broker, tracer_id: &str, request_id: u64, status: tracecloud_core::ResponseStatus) {
    let frame = Frame::Response { request_id, status };
    publish(broker, Topics::RESPONSES, tracer_id.as_bytes(), ChannelMessage::new(tracer_id, now_ms(), frame));
}

pub fn interrupt(
    broker: &Broker,
    tracer_id: &str,
    session_id: u64,
    code: tracecloud_core::InterruptCode,
    detail: &str,
) {
    let frame = Frame::Interrupt { session_id, code, detail: detail.into() };
    publish(broker, Topics::INTERRUPTS, tracer_id.as_bytes(), ChannelMessage::new(tracer_id, now_ms(), frame));
}
