//! Service behavior against a bare broker; the test plays the gateway.

mod common;

use std::time::Duration;

use common::*;
use serde_json::json;
use tracecloud_core::{Frame, InterruptCode, ResponseStatus};
use tracecloud_service::{ServiceConfig, CONSUMER_GROUP};
use tracecloud_store::{SessionState, SessionStore, TraceStore};

const WAIT: Duration = Duration::from_secs(10);

fn last_request(reqs: &[tracecloud_core::ChannelMessage]) -> (u64, Frame) {
    let msg = reqs.last().expect("a request was published");
    let id = match msg.frame {
        Frame::StartTrace { request_id, .. } | Frame::StopTrace { request_id, .. } => request_id,
        ref f => panic!("unexpected request frame {f:?}"),
    };
    (id, msg.frame.clone())
}

#[tokio::test]
async fn create_session_rules() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let svc = service(&bus.addr, dir.path(), "a").await;
    let api = Api::new(&svc);

    let (status, body) = api.post("/sessions", json!({ "tracer_id": "nobody" })).await;
    assert_eq!(status, 404);
    assert_eq!(body["code"], "unknown_tracer");

    announce(&bus.broker, "T1");
    api.wait_tracer("T1").await;
    let (_, tracers) = api.get("/tracers").await;
    let t = &tracers[0];
    assert_eq!(t["mode"], "file");
    assert_eq!(t["connected"], true);
    assert!(t["connected_at_us"].as_u64().unwrap() > 1_000_000_000_000_000);

    let s = api.create("T1").await;
    assert_eq!(s.state, SessionState::Created);
    assert_eq!(s.state_version, 0);
    assert_eq!(s.event_count, 0);

    let (status, body) = api.post("/sessions", json!({ "tracer_id": "T1" })).await;
    assert_eq!(status, 409);
    assert_eq!(body["code"], "tracer_busy");

    let (status, body) = api.post(&format!("/sessions/{}/stop", s.session_id), json!({})).await;
    assert_eq!(status, 409);
    assert_eq!(body["code"], "illegal_transition");

    let (status, _) = api.get("/sessions/999").await;
    assert_eq!(status, 404);
    let (status, _) = api.post("/sessions/999/start", json!({})).await;
    assert_eq!(status, 404);
    let (status, body) = api.get(&format!("/sessions/{}/stats", s.session_id)).await;
    assert_eq!(status, 409);
    assert_eq!(body["code"], "no_events");

    let (_, list) = api.get("/sessions").await;
    assert_eq!(list.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn full_lifecycle_driven_by_responses() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let svc = service(&bus.addr, dir.path(), "a").await;
    let api = Api::new(&svc);
    announce(&bus.broker, "T1");
    api.wait_tracer("T1").await;
    let sid = api.create("T1").await.session_id;

    let (status, body) = api.post(&format!("/sessions/{sid}/start"), json!({})).await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["state"], "STARTING");
    assert!(body["started_at_us"].as_u64().is_some());
    let reqs = requests(&bus.broker).await;
    assert_eq!(reqs.len(), 1, "exactly one command record");
    assert_eq!(reqs[0].tracer_id, "T1");
    let (start_req, frame) = last_request(&reqs);
    assert_eq!(frame, Frame::StartTrace { request_id: start_req, session_id: sid });

    let (status, body) = api.post(&format!("/sessions/{sid}/start"), json!({})).await;
    assert_eq!(status, 409);
    assert_eq!(body["code"], "illegal_transition");
    assert_eq!(requests(&bus.broker).await.len(), 1);

    respond(&bus.broker, "T1", start_req, ResponseStatus::Ok);
    api.wait_for(sid, WAIT, |s| s.state == SessionState::Active).await;

    let events = recording(5000);
    publish_events(&bus.broker, "T1", sid, &events);
    respond(&bus.broker, "T1", start_req, ResponseStatus::Ok);
    let done = api.wait_for(sid, WAIT, |s| s.state == SessionState::Completed && s.event_count == 5000).await;
    assert!(done.completed_at_us.is_some());
    assert!(done.processing_time_ms.is_some());

    let (status, stats) = api.get(&format!("/sessions/{sid}/stats")).await;
    assert_eq!(status, 200);
    assert_eq!(stats["event_count"], 5000);
    let ms = stats["processing_time_ms"].as_f64().unwrap();
    let eps = stats["throughput_eps"].as_f64().unwrap();
    assert!(ms >= 1.0);
    assert!((eps - 5000.0 / (ms / 1e3)).abs() < 1e-6 * eps);

    let (status, page) = api.get(&format!("/sessions/{sid}/events?limit=5")).await;
    assert_eq!(status, 200);
    let seqs: Vec<u64> = page["events"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
    assert_eq!(page["events"][1]["kind"], "TASK_START_EXEC");

    let (from, to) = (events[100].timestamp_ticks, events[200].timestamp_ticks);
    let (_, page) = api.get(&format!("/sessions/{sid}/events?from={from}&to={to}&limit=100000")).await;
    assert_eq!(page["count"], 100);
    let (status, _) = api.get(&format!("/sessions/{sid}/events?from=10&to=5")).await;
    assert_eq!(status, 400);
}

#[tokio::test]
async fn stop_flow_and_rejections() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let svc = service(&bus.addr, dir.path(), "a").await;
    let api = Api::new(&svc);
    for t in ["T1", "T2", "T3"] {
        announce(&bus.broker, t);
        api.wait_tracer(t).await;
    }

    // STOP acknowledged.
    let s1 = api.create("T1").await.session_id;
    api.post(&format!("/sessions/{s1}/start"), json!({})).await;
    let (start1, _) = last_request(&requests(&bus.broker).await);
    respond(&bus.broker, "T1", start1, ResponseStatus::Ok);
    api.wait_for(s1, WAIT, |s| s.state == SessionState::Active).await;
    let (status, body) = api.post(&format!("/sessions/{s1}/stop"), json!({})).await;
    assert_eq!(status, 200);
    assert_eq!(body["state"], "STOPPING");
    let (stop1, frame) = last_request(&requests(&bus.broker).await);
    assert_eq!(frame, Frame::StopTrace { request_id: stop1, session_id: s1 });
    assert!(stop1 > start1);
    respond(&bus.broker, "T1", stop1, ResponseStatus::Ok);
    api.wait_for(s1, WAIT, |s| s.state == SessionState::Completed).await;

    // START rejected.
    let s2 = api.create("T2").await.session_id;
    api.post(&format!("/sessions/{s2}/start"), json!({})).await;
    let (start2, _) = last_request(&requests(&bus.broker).await);
    respond(&bus.broker, "T2", start2, ResponseStatus::Rejected);
    let failed = api.wait_for(s2, WAIT, |s| s.state == SessionState::Failed).await;
    assert!(failed.error_detail.unwrap().contains("rejected"));

    // STOP rejected while stopping.
    let s3 = api.create("T3").await.session_id;
    api.post(&format!("/sessions/{s3}/start"), json!({})).await;
    let (start3, _) = last_request(&requests(&bus.broker).await);
    respond(&bus.broker, "T3", start3, ResponseStatus::Ok);
    api.wait_for(s3, WAIT, |s| s.state == SessionState::Active).await;
    api.post(&format!("/sessions/{s3}/stop"), json!({})).await;
    let (stop3, _) = last_request(&requests(&bus.broker).await);
    respond(&bus.broker, "T3", stop3, ResponseStatus::Rejected);
    api.wait_for(s3, WAIT, |s| s.state == SessionState::Interrupted).await;

    // Terminal sessions free the tracer.
    api.create("T1").await;
    api.create("T2").await;
}

#[tokio::test]
async fn events_promote_starting_to_active() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let svc = service(&bus.addr, dir.path(), "a").await;
    let api = Api::new(&svc);
    announce(&bus.broker, "T1");
    api.wait_tracer("T1").await;
    let sid = api.create("T1").await.session_id;
    api.post(&format!("/sessions/{sid}/start"), json!({})).await;

    publish_events(&bus.broker, "T1", sid, &recording(10));
    let s = api.wait_for(sid, WAIT, |s| s.event_count == 10).await;
    assert_eq!(s.state, SessionState::Active);
    assert!(s.first_event_at_us.is_some());
}

#[tokio::test]
async fn interrupts_end_sessions_and_disconnects_mark_tracers() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let svc = service(&bus.addr, dir.path(), "a").await;
    let api = Api::new(&svc);
    for t in ["T1", "T2"] {
        announce(&bus.broker, t);
        api.wait_tracer(t).await;
    }
    let s1 = api.create("T1").await.session_id;
    let s2 = api.create("T2").await.session_id;
    for (sid, tracer) in [(s1, "T1"), (s2, "T2")] {
        api.post(&format!("/sessions/{sid}/start"), json!({})).await;
        let (req, _) = last_request(&requests(&bus.broker).await);
        respond(&bus.broker, tracer, req, ResponseStatus::Ok);
        api.wait_for(sid, WAIT, |s| s.state == SessionState::Active).await;
    }

    // Only the owning tracer can interrupt a session.
    interrupt(&bus.broker, "T2", s1, InterruptCode::TargetFault, "spoofed");
    interrupt(&bus.broker, "T1", s1, InterruptCode::TargetFault, "watchdog reset");
    let s = api.wait_for(s1, WAIT, |s| s.state == SessionState::Interrupted).await;
    assert_eq!(s.error_detail.as_deref(), Some("TARGET_FAULT: watchdog reset"));
    assert_eq!(api.session(s2).await.state, SessionState::Active);

    // A decode error is reported but not fatal.
    interrupt(&bus.broker, "T2", s2, InterruptCode::DecodeError, "truncated batch");
    interrupt(&bus.broker, "T2", s2, InterruptCode::Disconnected, "tracer connection closed");
    let s = api.wait_for(s2, WAIT, |s| s.state == SessionState::Interrupted).await;
    assert_eq!(s.error_detail.as_deref(), Some("DISCONNECTED: tracer connection closed"));
    let store = SessionStore::open(dir.path().join("sessions.db"), false).unwrap();
    assert_eq!(store.counter("decode_errors").unwrap(), 1);

    interrupt(&bus.broker, "T1", 0, InterruptCode::Disconnected, "tracer connection closed");
    eventually(WAIT, || async {
        let (_, tracers) = api.get("/tracers").await;
        tracers.as_array().unwrap().iter().any(|t| t["tracer_id"] == "T1" && t["connected"] == false)
    })
    .await;
}

#[tokio::test]
async fn unanswered_start_times_out() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let mut config = ServiceConfig::new(&bus.addr, dir.path());
    config.start_timeout = Duration::from_millis(500);
    let svc = tracecloud_service::start(config).await.unwrap();
    let api = Api::new(&svc);
    announce(&bus.broker, "T1");
    api.wait_tracer("T1").await;
    let sid = api.create("T1").await.session_id;
    api.post(&format!("/sessions/{sid}/start"), json!({})).await;
    let s = api.wait_for(sid, WAIT, |s| s.state == SessionState::Failed).await;
    assert!(s.error_detail.unwrap().contains("no response"));
}

#[tokio::test]
async fn poison_records_are_skipped_and_counted() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let svc = service(&bus.addr, dir.path(), "a").await;
    let api = Api::new(&svc);
    announce(&bus.broker, "T1");
    api.wait_tracer("T1").await;
    let sid = api.create("T1").await.session_id;

    let key = tracecloud_core::channel::session_key(sid);
    bus.broker.publish(tracecloud_core::Topics::EVENTS, &key, b"\xff\xffgarbage").unwrap();
    bus.broker.publish(tracecloud_core::Topics::RESPONSES, b"T1", b"").unwrap();
    publish_events(&bus.broker, "T1", 4242, &recording(3));
    publish_events(&bus.broker, "T1", sid, &recording(7));

    api.wait_for(sid, WAIT, |s| s.event_count == 7).await;
    let store = SessionStore::open(dir.path().join("sessions.db"), false).unwrap();
    eventually(WAIT, || async { store.counter("poison_records").unwrap() == 5 }).await;
}

#[tokio::test]
async fn redelivered_and_prewritten_events_are_stored_once() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let svc = service(&bus.addr, dir.path(), "a").await;
    let api = Api::new(&svc);
    announce(&bus.broker, "T1");
    api.wait_tracer("T1").await;
    let sid = api.create("T1").await.session_id;
    let events = recording(20_000);

    // An instance that stored the first half and died before committing.
    let traces = TraceStore::open(dir.path().join("traces"), false).unwrap();
    traces.append_events(sid, &events[..10_000]).unwrap();

    publish_events(&bus.broker, "T1", sid, &events[..12_000]);
    publish_events(&bus.broker, "T1", sid, &events[5_000..]);
    publish_events(&bus.broker, "T1", sid, &events[19_000..]);
    api.wait_for(sid, WAIT, |s| s.event_count == 20_000).await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert_eq!(api.session(sid).await.event_count, 20_000);
    assert_eq!(traces.event_count(sid).unwrap(), 20_000);
    let stored = traces.query_events(sid, 0, u64::MAX, usize::MAX).unwrap();
    assert_eq!(stored, events);
}

#[tokio::test]
async fn instances_share_the_work_and_survive_a_kill() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let a = service(&bus.addr, dir.path(), "a").await;
    let b = service(&bus.addr, dir.path(), "b").await;
    let api_b = Api::new(&b);
    let mut sessions = Vec::new();
    for i in 0..8 {
        let t = format!("T{i}");
        announce(&bus.broker, &t);
        api_b.wait_tracer(&t).await;
        sessions.push((api_b.create(&t).await.session_id, t));
    }
    eventually(WAIT, || async {
        (0..16).all(|p| bus.broker.committed(tracecloud_core::Topics::EVENTS, CONSUMER_GROUP, p).is_some())
    })
    .await;

    let events = recording(6000);
    for (sid, t) in &sessions {
        publish_events(&bus.broker, t, *sid, &events[..3000]);
    }
    tokio::time::sleep(Duration::from_millis(100)).await;
    a.shutdown().await;
    for (sid, t) in &sessions {
        publish_events(&bus.broker, t, *sid, &events[2000..]);
    }
    for (sid, _) in &sessions {
        api_b.wait_for(*sid, Duration::from_secs(30), |s| s.event_count == 6000).await;
    }
    let traces = TraceStore::open(dir.path().join("traces"), false).unwrap();
    for (sid, _) in &sessions {
        assert_eq!(traces.query_events(*sid, 0, u64::MAX, usize::MAX).unwrap(), events);
    }
}

#[tokio::test]
async fn live_stream_pushes_snapshot_changes_and_rates() {
    let bus = bare_bus().await;
    let dir = tempdir();
    let svc = service(&bus.addr, dir.path(), "a").await;
    let api = Api::new(&svc);
    announce(&bus.broker, "T1");
    api.wait_tracer("T1").await;

    let mut resp = api.http.get(format!("{}/live", api.base)).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    let mut reader = SseReader::default();
    let first = reader.next(&mut resp).await;
    assert_eq!(first["type"], "snapshot");
    assert_eq!(first["tracers"][0]["tracer_id"], "T1");

    let sid = api.create("T1").await.session_id;
    api.post(&format!("/sessions/{sid}/start"), json!({})).await;
    publish_events(&bus.broker, "T1", sid, &recording(500));
    interrupt(&bus.broker, "T1", sid, InterruptCode::BufferOverflow, "ring full");

    let mut saw = (false, false, false);
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while !(saw.0 && saw.1 && saw.2) {
        assert!(tokio::time::Instant::now() < deadline, "missing live messages: {saw:?}");
        let msg = reader.next(&mut resp).await;
        match msg["type"].as_str().unwrap() {
            "session" if msg["session"]["session_id"] == sid => saw.0 = true,
            "interrupt" => {
                assert_eq!(msg["session_id"], sid);
                assert_eq!(msg["state"], "INTERRUPTED");
                saw.1 = true;
            }
            "rate" if msg["session_id"] == sid => {
                assert!(msg["rate_eps"].as_f64().unwrap() >= 0.0);
                saw.2 = true;
            }
            _ => {}
        }
    }
}

#[derive(Default)]
struct SseReader {
    buf: String,
}

impl SseReader {
    /// Next `data:` payload as JSON.
    async fn next(&mut self, resp: &mut reqwest::Response) -> serde_json::Value {
        loop {
            if let Some(end) = self.buf.find("\n\n") {
                let block: String = self.buf.drain(..end + 2).collect();
                let data: String = block.lines().filter_map(|l| l.strip_prefix("data:")).map(str::trim_start).collect();
                if !data.is_empty() {
                    return serde_json::from_str(&data).unwrap();
                }
                continue;
            }
            let chunk = tokio::time::timeout(Duration::from_secs(10), resp.chunk()).await.unwrap().unwrap().unwrap();
            self.buf.push_str(std::str::from_utf8(&chunk).unwrap());
        }
    }
}
