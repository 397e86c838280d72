//! Session service instance.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use serde_json::json;
use tracecloud_service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(version, about = "Consume trace topics, drive session state and serve the HTTP API")]
struct Args {
    /// Address of the message bus hosted by the gateway.
    #[arg(long, env = "BUS_ADDR", default_value = "127.0.0.1:9092")]
    bus: String,
    /// Directory shared by all instances: `sessions.db` and `traces/`.
    #[arg(long, env = "DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, env = "API_HOST", default_value = "0.0.0.0")]
    api_host: IpAddr,
    /// 0 picks a free port; the ready line reports it.
    #[arg(long, env = "API_PORT", default_value_t = 8080)]
    api_port: u16,
    /// Consumer identity on the bus; defaults to `svc-<pid>`.
    #[arg(long, env = "INSTANCE_ID")]
    instance_id: Option<String>,
    /// fsync store writes before committing bus offsets.
    #[arg(long, env = "FSYNC")]
    fsync: bool,
    /// STARTING sessions without a tracer response fail after this long.
    #[arg(long, default_value_t = 10_000)]
    start_timeout_ms: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracecloud::init_logging();
    let args = Args::parse();
    let mut config = ServiceConfig::new(args.bus, args.data_dir);
    config.api_addr = SocketAddr::new(args.api_host, args.api_port);
    config.fsync = args.fsync;
    config.start_timeout = Duration::from_millis(args.start_timeout_ms);
    if let Some(id) = args.instance_id {
        config.instance_id = id;
    }
    let data_dir = config.data_dir.clone();
    let mut handle = tracecloud_service::start(config).await.context("starting session service")?;
    tracecloud::announce_ready(json!({
        "api_addr": handle.api_addr.to_string(),
        "instance_id": handle.instance_id,
        "data_dir": data_dir,
    }));
    tokio::select! {
        _ = handle.wait() => anyhow::bail!("service task stopped"),
        _ = tracecloud::shutdown_signal() => tracing::info!("shutting down"),
    }
    Ok(())
}
