//! Emulated target tracer replaying a recording file.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use tracecloud_core::{read_recording, TracerMode};
use tracecloud_tracer::{Tracer, TracerConfig, DEFAULT_BATCH_SIZE, DEFAULT_PACED_RATE_EPS, RTT_RATE_CAP_BYTES_PER_S};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    /// Send as fast as the connection accepts.
    File,
    /// Send at `--rate` events per second.
    Paced,
}

#[derive(Debug, Parser)]
#[command(version, about = "Replay a trace recording to the device gateway on command")]
struct Args {
    #[arg(long)]
    id: String,
    /// Gateway endpoint, e.g. `ws://127.0.0.1:9000/tracer`.
    #[arg(long, env = "GATEWAY_URL")]
    gateway: String,
    #[arg(long)]
    recording: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::File)]
    mode: Mode,
    /// Events per second in paced mode.
    #[arg(long, default_value_t = DEFAULT_PACED_RATE_EPS)]
    rate: f64,
    /// Events per EVENT_BATCH frame.
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch: usize,
    /// Limit the sending byte rate to the debug-probe ceiling.
    #[arg(long)]
    probe_cap: bool,
    /// Exit after this many sessions.
    #[arg(long)]
    max_sessions: Option<usize>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracecloud::init_logging();
    let args = Args::parse();
    let recording =
        read_recording(&args.recording).with_context(|| format!("reading recording {}", args.recording.display()))?;
    let mode = match args.mode {
        Mode::File => TracerMode::File,
        Mode::Paced => TracerMode::Paced,
    };
    let mut config = TracerConfig::new(args.id, args.gateway, mode);
    config.paced_rate_eps = args.rate;
    config.batch_size = args.batch;
    config.rate_cap_bytes_per_s = args.probe_cap.then_some(RTT_RATE_CAP_BYTES_PER_S);
    config.max_sessions = args.max_sessions;
    let tracer = Tracer::new(config, recording.events)?;
    tokio::select! {
        reports = tracer.run() => {
            for r in reports? {
                tracing::info!(
                    session_id = r.session_id,
                    events_sent = r.events_sent,
                    duration_ms = r.duration.as_millis() as u64,
                    stopped = r.stopped,
                    "session finished"
                );
            }
        }
        _ = tracecloud::shutdown_signal() => tracing::info!("shutting down"),
    }
    Ok(())
}
