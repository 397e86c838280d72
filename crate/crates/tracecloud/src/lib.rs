//! Process plumbing shared by the executables.
//!
//! Logs are JSON lines on stderr, filtered by `RUST_LOG` (default `info`).
//! Long-running servers print exactly one JSON object on stdout once they
//! accept connections, e.g. `{"event":"ready","api_addr":"127.0.0.1:8080"}`.

use std::io::Write;

use serde_json::Value;
use tracing_subscriber::EnvFilter;

pub fn init_logging() {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().json().with_env_filter(filter).with_writer(std::io::stderr).init();
}

/// Prints the ready line: `fields` plus `"event":"ready"`.
pub fn announce_ready(mut fields: Value) {
    fields["event"] = "ready".into();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{fields}");
    let _ = out.flush();
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}
