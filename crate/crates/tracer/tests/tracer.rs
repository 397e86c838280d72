use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::routing::get;
use axum::Router;
use tokio::sync::mpsc;
use tracecloud_core::{decode_frame, encode_frame, EventKind, Frame, ResponseStatus, TraceEvent, TracerMode};
use tracecloud_tracer::{Backoff, Tracer, TracerConfig, TracerError};

/// Gateway stand-in that hands every accepted socket to the test body.
async fn fake_gateway() -> (String, mpsc::UnboundedReceiver<WebSocket>) {
    let (tx, rx) = mpsc::unbounded_channel::<WebSocket>();
    let app = Router::new()
        .route(
            "/tracer",
            get(|ws: WebSocketUpgrade, State(tx): State<mpsc::UnboundedSender<WebSocket>>| async move {
                ws.on_upgrade(move |socket| async move {
                    let _ = tx.send(socket);
                })
            }),
        )
        .with_state(tx);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("ws://{addr}/tracer"), rx)
}

async fn recv(ws: &mut WebSocket) -> Option<Frame> {
    loop {
        match ws.recv().await? {
            Ok(Message::Binary(b)) => return Some(decode_frame(&b).unwrap()),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => continue,
        }
    }
}

async fn send(ws: &mut WebSocket, frame: Frame) {
    ws.send(Message::Binary(encode_frame(&frame).unwrap().into())).await.unwrap();
}

fn recording(n: u64) -> Vec<TraceEvent> {
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

/// Drains event batches until the response to `final_request`; returns the
/// events in arrival order.
async fn collect_until(ws: &mut WebSocket, session: u64, final_request: u64) -> Vec<TraceEvent> {
    let mut events = Vec::new();
    while let Some(frame) = recv(ws).await {
        match frame {
            Frame::EventBatch { session_id, events: batch, .. } => {
                assert_eq!(session_id, session);
                events.extend(batch);
            }
            Frame::Response { request_id, status: ResponseStatus::Ok } if request_id == final_request => break,
            other => panic!("unexpected frame {other:?}"),
        }
    }
    events
}

#[tokio::test]
async fn file_mode_replays_everything_without_sleeping() {
    let (url, mut sockets) = fake_gateway().await;
    let events = recording(31_726);
    let tracer = Tracer::new(
        TracerConfig { max_sessions: Some(1), ..TracerConfig::new("T1", &url, TracerMode::File) },
        events.clone(),
    )
    .unwrap();
    let metrics = tracer.metrics();
    let run = tokio::spawn(tracer.run());

    let mut ws = sockets.recv().await.unwrap();
    assert_eq!(recv(&mut ws).await, Some(Frame::Hello { tracer_id: "T1".into(), mode: TracerMode::File }));
    send(&mut ws, Frame::StartTrace { request_id: 5, session_id: 7 }).await;
    assert_eq!(recv(&mut ws).await, Some(Frame::Response { request_id: 5, status: ResponseStatus::Ok }));
    let got = collect_until(&mut ws, 7, 5).await;
    assert_eq!(got, events);

    let reports = run.await.unwrap().unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!((reports[0].events_sent, reports[0].stopped), (31_726, false));
    assert_eq!(metrics.intentional_delays.load(Ordering::Relaxed), 0);
    assert_eq!(metrics.batches_sent.load(Ordering::Relaxed), 31_726u64.div_ceil(64));
}

#[tokio::test]
async fn paced_mode_holds_the_configured_rate() {
    let (url, mut sockets) = fake_gateway().await;
    let tracer = Tracer::new(
        TracerConfig { max_sessions: Some(1), ..TracerConfig::new("P1", &url, TracerMode::Paced) },
        recording(31_726),
    )
    .unwrap();
    let run = tokio::spawn(tracer.run());
    let mut ws = sockets.recv().await.unwrap();
    recv(&mut ws).await.unwrap();
    send(&mut ws, Frame::StartTrace { request_id: 1, session_id: 1 }).await;
    recv(&mut ws).await.unwrap();
    let began = Instant::now();
    let got = collect_until(&mut ws, 1, 1).await;
    let wall = began.elapsed().as_secs_f64();
    assert_eq!(got.len(), 31_726);
    let expected = 31_726.0 / 3_200.0;
    assert!((wall - expected).abs() <= expected * 0.05, "paced replay took {wall:.2}s, expected {expected:.2}s");
    run.await.unwrap().unwrap();
}

#[tokio::test]
async fn stop_ends_the_stream_within_one_batch() {
    let (url, mut sockets) = fake_gateway().await;
    let tracer = Tracer::new(
        TracerConfig { max_sessions: Some(1), ..TracerConfig::new("S1", &url, TracerMode::Paced) },
        recording(31_726),
    )
    .unwrap();
    let run = tokio::spawn(tracer.run());
    let mut ws = sockets.recv().await.unwrap();
    recv(&mut ws).await.unwrap();
    send(&mut ws, Frame::StartTrace { request_id: 1, session_id: 3 }).await;
    recv(&mut ws).await.unwrap();

    let mut before = Vec::new();
    while before.len() < 640 {
        match recv(&mut ws).await.unwrap() {
            Frame::EventBatch { events, .. } => before.extend(events),
            other => panic!("unexpected {other:?}"),
        }
    }
    send(&mut ws, Frame::StopTrace { request_id: 2, session_id: 3 }).await;
    let after = collect_until(&mut ws, 3, 2).await;
    assert!(after.len() <= 64, "{} events after STOP", after.len());
    let all: Vec<u64> = before.iter().chain(&after).map(|e| e.seq).collect();
    assert_eq!(all, (0..all.len() as u64).collect::<Vec<_>>());

    let reports = run.await.unwrap().unwrap();
    assert!(reports[0].stopped);
    assert_eq!(reports[0].events_sent, all.len() as u64);
}

#[tokio::test]
async fn commands_in_the_wrong_state_are_rejected() {
    let (url, mut sockets) = fake_gateway().await;
    let tracer = Tracer::new(
        TracerConfig { max_sessions: Some(1), ..TracerConfig::new("R1", &url, TracerMode::Paced) },
        recording(640),
    )
    .unwrap();
    let run = tokio::spawn(tracer.run());
    let mut ws = sockets.recv().await.unwrap();
    recv(&mut ws).await.unwrap();

    send(&mut ws, Frame::StopTrace { request_id: 1, session_id: 1 }).await;
    assert_eq!(recv(&mut ws).await, Some(Frame::Response { request_id: 1, status: ResponseStatus::Rejected }));

    send(&mut ws, Frame::StartTrace { request_id: 2, session_id: 1 }).await;
    assert_eq!(recv(&mut ws).await, Some(Frame::Response { request_id: 2, status: ResponseStatus::Ok }));
    send(&mut ws, Frame::StartTrace { request_id: 3, session_id: 2 }).await;
    let mut rejected = false;
    let mut count = 0;
    while let Some(frame) = recv(&mut ws).await {
        match frame {
            Frame::EventBatch { events, .. } => count += events.len(),
            Frame::Response { request_id: 3, status: ResponseStatus::Rejected } => rejected = true,
            Frame::Response { request_id: 2, status: ResponseStatus::Ok } => break,
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(rejected);
    assert_eq!(count, 640);
    run.await.unwrap().unwrap();
}

#[tokio::test]
async fn duplicate_id_rejection_is_fatal() {
    let (url, mut sockets) = fake_gateway().await;
    let tracer = Tracer::new(TracerConfig::new("D1", &url, TracerMode::File), recording(10)).unwrap();
    let run = tokio::spawn(tracer.run());
    let mut ws = sockets.recv().await.unwrap();
    recv(&mut ws).await.unwrap();
    send(&mut ws, Frame::Response { request_id: 0, status: ResponseStatus::Rejected }).await;
    let _ = ws.send(Message::Close(None)).await;
    assert!(matches!(run.await.unwrap(), Err(TracerError::DuplicateTracerId(id)) if id == "D1"));
}

#[tokio::test]
async fn connection_loss_mid_session_is_reported() {
    let (url, mut sockets) = fake_gateway().await;
    let tracer = Tracer::new(TracerConfig::new("L1", &url, TracerMode::Paced), recording(31_726)).unwrap();
    let run = tokio::spawn(tracer.run());
    let mut ws = sockets.recv().await.unwrap();
    recv(&mut ws).await.unwrap();
    send(&mut ws, Frame::StartTrace { request_id: 1, session_id: 9 }).await;
    recv(&mut ws).await.unwrap();
    recv(&mut ws).await.unwrap();
    drop(ws);
    match tokio::time::timeout(Duration::from_secs(10), run).await.unwrap().unwrap() {
        Err(TracerError::ConnectionLost { session_id: 9, events_sent }) => assert!(events_sent < 31_726),
        other => panic!("expected ConnectionLost, got {other:?}"),
    }
}

#[tokio::test]
async fn idle_tracer_reconnects_after_gateway_restart() {
    let (url, mut sockets) = fake_gateway().await;
    let cfg = TracerConfig {
        backoff: Backoff { initial: Duration::from_millis(20), max: Duration::from_millis(100) },
        ..TracerConfig::new("I1", &url, TracerMode::File)
    };
    let tracer = Tracer::new(cfg, recording(5)).unwrap();
    let metrics = tracer.metrics();
    let run = tokio::spawn(tracer.run());
    let mut first = sockets.recv().await.unwrap();
    recv(&mut first).await.unwrap();
    drop(first);
    let mut second = sockets.recv().await.unwrap();
    assert!(matches!(recv(&mut second).await, Some(Frame::Hello { .. })));
    assert_eq!(metrics.connect_attempts().len(), 2);
    run.abort();
}

#[tokio::test]
async fn connect_retries_follow_the_backoff_schedule() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("ws://{}/tracer", listener.local_addr().unwrap());
    drop(listener);
    let cfg = TracerConfig { max_connect_attempts: Some(4), ..TracerConfig::new("B1", &url, TracerMode::File) };
    let tracer = Tracer::new(cfg, recording(1)).unwrap();
    let metrics = tracer.metrics();
    assert!(matches!(tracer.run().await, Err(TracerError::ConnectFailed { attempts: 4, .. })));
    let at = metrics.connect_attempts();
    let gaps: Vec<f64> = at.windows(2).map(|w| (w[1] - w[0]).as_secs_f64()).collect();
    for (gap, want) in gaps.iter().zip([0.5, 1.0, 2.0]) {
        assert!(*gap >= want && *gap < want + 0.25, "gaps {gaps:?}");
    }
}
