//! Device gateway: accepts tracer connections and hosts the message bus.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use serde_json::json;
use tracecloud_bus::BrokerConfig;
use tracecloud_gateway::GatewayConfig;

#[derive(Debug, Parser)]
#[command(version, about = "Terminate tracer connections and bridge them to the message bus")]
struct Args {
    /// Listen address for tracer connections (`/tracer`) and `/metrics`.
    #[arg(long, env = "GATEWAY_ADDR", default_value = "0.0.0.0:9000")]
    listen: SocketAddr,
    /// Listen address of the message bus served to session-service instances.
    #[arg(long, env = "BUS_ADDR", default_value = "127.0.0.1:9092")]
    bus: SocketAddr,
    /// Persist bus partitions and committed offsets here; memory only if unset.
    #[arg(long, env = "BUS_DATA_DIR")]
    bus_data_dir: Option<PathBuf>,
    /// fsync bus files after every publish batch and offset commit.
    #[arg(long, env = "BUS_FSYNC")]
    fsync: bool,
    /// Consumer-group members silent for this long lose their partitions.
    #[arg(long, default_value_t = 10_000)]
    session_timeout_ms: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracecloud::init_logging();
    let args = Args::parse();
    let broker = BrokerConfig {
        data_dir: args.bus_data_dir,
        fsync_per_batch: args.fsync,
        session_timeout: Duration::from_millis(args.session_timeout_ms),
    };
    let mut handle =
        tracecloud_gateway::start(GatewayConfig { listen: args.listen, bus_listen: Some(args.bus), broker })
            .await
            .context("starting gateway")?;
    let bus_addr = handle.bus_addr.expect("bus listener configured");
    tracecloud::announce_ready(json!({
        "tracer_addr": handle.tracer_addr.to_string(),
        "bus_addr": bus_addr.to_string(),
        "tracer_url": handle.tracer_url(),
    }));
    tokio::select! {
        _ = handle.wait() => anyhow::bail!("gateway task stopped"),
        _ = tracecloud::shutdown_signal() => tracing::info!("shutting down"),
    }
    Ok(())
}
