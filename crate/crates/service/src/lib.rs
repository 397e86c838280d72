//! Session service.
//!
//! A stateless instance that joins the `session-service` consumer group on
//! the four inbound topics, drives session state machines through the
//! store's compare-and-set and serves the HTTP API. Any number of instances
//! may share one data directory; everything session-scoped lives in the
//! stores, so an instance can be killed and replaced at any point.
//!
//! Offsets are committed only after the corresponding store write returned.
//! A crash between the two redelivers records, which the trace store
//! deduplicates by sequence number.

mod api;
mod app;
mod consume;
mod live;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tracecloud_store::{SessionStore, StoreError, TraceStore};

pub use api::{ApiError, ApiSession, ApiTracer, EventRow, EventsPage};
pub use live::LiveMessage;

/// Consumer group joined by every instance.
pub const CONSUMER_GROUP: &str = "session-service";
pub const API_PORT_ENV: &str = "API_PORT";
pub const INSTANCE_ID_ENV: &str = "INSTANCE_ID";
/// A session still STARTING this long after the start command fails.
pub const DEFAULT_START_TIMEOUT: Duration = Duration::from_secs(10);
/// Version conflicts retried per transition before giving up.
pub const MAX_CAS_RETRIES: usize = 3;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bus_addr: String,
    pub data_dir: PathBuf,
    pub api_addr: SocketAddr,
    pub instance_id: String,
    /// fsync session commits and trace blocks before acknowledging them.
    pub fsync: bool,
    pub start_timeout: Duration,
    /// Upper bound on `trace.events` records handled per poll.
    pub events_poll_max: u32,
}

impl ServiceConfig {
    pub fn new(bus_addr: impl Into<String>, data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            bus_addr: bus_addr.into(),
            data_dir: data_dir.into(),
            api_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            instance_id: format!("svc-{}", std::process::id()),
            fsync: false,
            start_timeout: DEFAULT_START_TIMEOUT,
            events_poll_max: 4096,
        }
    }
}

/// A running instance. Dropping it stops all of its tasks.
pub struct ServiceHandle {
    pub api_addr: SocketAddr,
    pub instance_id: String,
    tasks: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn api_url(&self) -> String {
        format!("http://{}", self.api_addr)
    }

    /// Resolves when any task exits.
    pub async fn wait(&mut self) {
        if self.tasks.is_empty() {
            return std::future::pending().await;
        }
        let (res, _, rest) = futures_util::future::select_all(self.tasks.drain(..)).await;
        if let Err(e) = res {
            tracing::error!(error = %e, "service task failed");
        }
        self.tasks = rest;
    }

    /// Stops all tasks and waits until they are gone, so that bus
    /// connections are closed when this returns.
    pub async fn shutdown(mut self) {
        let tasks = std::mem::take(&mut self.tasks);
        for t in &tasks {
            t.abort();
        }
        for t in tasks {
            let _ = t.await;
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// Opens the stores under `data_dir`, joins the consumer group and starts
/// serving the API.
pub async fn start(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    std::fs::create_dir_all(&config.data_dir)?;
    let sessions = SessionStore::open(config.data_dir.join("sessions.db"), config.fsync)?;
    let traces = TraceStore::open(config.data_dir.join("traces"), config.fsync)?;
    let app = Arc::new(app::App::new(config.clone(), sessions, traces));

    let listener = TcpListener::bind(config.api_addr).await?;
    let api_addr = listener.local_addr()?;
    let mut tasks = consume::spawn_all(&app);
    tasks.push(tokio::spawn(live::run(app.clone())));
    let router = api::router(app);
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!(error = %e, "http server stopped");
        }
    }));
    tracing::info!(%api_addr, instance_id = config.instance_id, bus = config.bus_addr, "session service started");
    Ok(ServiceHandle { api_addr, instance_id: config.instance_id, tasks })
}
