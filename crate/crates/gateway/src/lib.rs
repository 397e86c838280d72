//! Device gateway.
//!
//! Accepts tracer connections at `/tracer` (WebSocket, binary frames),
//! republishes what tracers send onto the five bus topics and forwards
//! commands from `trace.requests` to the addressed tracer. The broker runs
//! inside the gateway process and is optionally exposed over TCP for the
//! session services.
//!
//! | inbound frame  | topic               | key              |
//! |----------------|---------------------|------------------|
//! | HELLO          | `trace.connections` | tracer id        |
//! | EVENT_BATCH    | `trace.events`      | session id, one record per event |
//! | RESPONSE       | `trace.responses`   | tracer id        |
//! | INTERRUPT      | `trace.interrupts`  | tracer id        |
//!
//! When a connection closes, a DISCONNECTED interrupt is published with the
//! session that was running on it, or session id 0 if none was.

mod connection;
mod metrics;
mod registry;
mod router;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::routing::get;
use axum::Router;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tracecloud_bus::{Broker, BrokerConfig, BusError};
use tracecloud_core::Topics;

pub use metrics::Metrics;
pub use registry::{Registry, RouteError, SessionTracker, TracerSnapshot};

/// Environment variable with the tracer listen address.
pub const GATEWAY_ADDR_ENV: &str = "GATEWAY_ADDR";
pub const DEFAULT_GATEWAY_ADDR: &str = "0.0.0.0:9000";
/// Consumer group used to read `trace.requests`.
pub const ROUTER_GROUP: &str = "device-gateway";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    /// Serve the broker's TCP protocol here.
    pub bus_listen: Option<SocketAddr>,
    pub broker: BrokerConfig,
}

pub(crate) struct Shared {
    pub broker: Arc<Broker>,
    pub registry: Registry,
    pub metrics: Metrics,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// A running gateway. Dropping it stops all of its tasks.
pub struct GatewayHandle {
    pub tracer_addr: SocketAddr,
    pub bus_addr: Option<SocketAddr>,
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn broker(&self) -> &Arc<Broker> {
        &self.shared.broker
    }

    pub fn metrics(&self) -> &Metrics {
        &self.shared.metrics
    }

    pub fn tracers(&self) -> Vec<TracerSnapshot> {
        self.shared.registry.snapshot()
    }

    /// Text served at `GET /metrics`.
    pub fn metrics_text(&self) -> String {
        metrics::render(&self.shared)
    }

    pub fn tracer_url(&self) -> String {
        format!("ws://{}/tracer", self.tracer_addr)
    }

    /// Resolves when any gateway task exits.
    pub async fn wait(&mut self) {
        if self.tasks.is_empty() {
            return std::future::pending().await;
        }
        let (res, _, rest) = futures_util::future::select_all(self.tasks.drain(..)).await;
        if let Err(e) = res {
            tracing::error!(error = %e, "gateway task failed");
        }
        self.tasks = rest;
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// Opens the broker, creates the five topics and starts serving.
pub async fn start(config: GatewayConfig) -> Result<GatewayHandle, GatewayError> {
    let broker = Broker::open(config.broker.clone())?;
    for (topic, partitions) in Topics::ALL {
        broker.ensure_topic(topic, partitions)?;
    }
    let shared =
        Arc::new(Shared { broker: broker.clone(), registry: Registry::default(), metrics: Metrics::default() });
    let mut tasks = Vec::new();

    let bus_addr = match config.bus_listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).await?;
            let local = listener.local_addr()?;
            let broker = broker.clone();
            tasks.push(tokio::spawn(async move {
                if let Err(e) = tracecloud_bus::server::serve(broker, listener).await {
                    tracing::error!(error = %e, "bus server stopped");
                }
            }));
            Some(local)
        }
        None => None,
    };

    let subscription = broker.subscribe(Topics::REQUESTS, ROUTER_GROUP, "gateway")?;
    tasks.push(tokio::spawn(router::run(shared.clone(), subscription)));

    let app = Router::new()
        .route("/tracer", get(connection::upgrade))
        .route("/metrics", get(metrics::handler))
        .with_state(shared.clone());
    let listener = TcpListener::bind(config.listen).await?;
    let tracer_addr = listener.local_addr()?;
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "http server stopped");
        }
    }));
    tracing::info!(%tracer_addr, ?bus_addr, "gateway listening");
    Ok(GatewayHandle { tracer_addr, bus_addr, shared, tasks })
}
