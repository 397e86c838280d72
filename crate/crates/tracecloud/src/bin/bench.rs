//! Workload generator and scaling benchmark.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracecloud_bench::workload::{self, WorkloadSpec, DEFAULT_SEED};
use tracecloud_bench::{
    check_invariants, reference_configs, run_config, run_repetition, write_report, BenchConfig, ConfigResult,
    Deployment, FailoverPlan, RunOptions, Thresholds,
};
use tracecloud_core::{read_recording, TraceEvent};

#[derive(Debug, Parser)]
#[command(
    version,
    about = "Generate the reference workload and measure session throughput",
    after_help = "Exit status is 1 if any run fails or any checked invariant is violated."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic recording.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = workload::REFERENCE_EVENTS)]
        events: usize,
        #[arg(long, default_value_t = workload::REFERENCE_DURATION_TICKS)]
        duration_ticks: u64,
    },
    /// Run one configuration.
    Run {
        #[arg(long)]
        instances: usize,
        #[arg(long)]
        sessions: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        /// Kill one random instance per repetition and restart it after
        /// `--restart-after-s`; also checks for duplicate stored events.
        #[arg(long)]
        failover: bool,
        #[arg(long, default_value_t = 5)]
        restart_after_s: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Run the six reference configurations and check the scaling trends.
    Suite {
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Recording to replay; the reference workload if unset.
    #[arg(long)]
    recording: Option<PathBuf>,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Run gateway and services inside this process instead of spawning
    /// the sibling `gateway` and `session-service` executables.
    #[arg(long)]
    in_process: bool,
    /// Tracers run elsewhere: bind the gateway here and wait for tracers
    /// `tracer-0..tracer-<M-1>` to connect instead of starting them.
    #[arg(long, value_name = "ADDR")]
    remote: Option<SocketAddr>,
    /// Keep per-repetition data directories.
    #[arg(long)]
    keep_data: bool,
    /// Per-repetition time limit.
    #[arg(long, default_value_t = 900)]
    timeout_s: u64,
    /// Log filter for spawned processes.
    #[arg(long, default_value = "warn")]
    child_log: String,
}

impl Common {
    fn options(&self) -> anyhow::Result<RunOptions> {
        let deployment = if self.in_process {
            Deployment::InProcess
        } else {
            match Deployment::sibling_binaries()? {
                Deployment::Processes { gateway_bin, service_bin, .. } => {
                    Deployment::Processes { gateway_bin, service_bin, log_filter: self.child_log.clone() }
                }
                d => d,
            }
        };
        let mut opts = RunOptions::new(deployment, self.out.join("work"));
        opts.run_timeout = Duration::from_secs(self.timeout_s);
        opts.keep_data = self.keep_data;
        opts.gateway_listen = self.remote;
        opts.remote_tracers = self.remote.is_some();
        Ok(opts)
    }

    fn events(&self) -> anyhow::Result<Arc<[TraceEvent]>> {
        let recording = match &self.recording {
            Some(path) => read_recording(path).with_context(|| format!("reading {}", path.display()))?,
            None => workload::reference_recording(DEFAULT_SEED),
        };
        Ok(recording.events.into())
    }
}

#[tokio::main]
async fn main() -> anyhow::Result<ExitCode> {
    tracecloud::init_logging();
    match Cli::parse().command {
        Cmd::Gen { out, seed, events, duration_ticks } => {
            let spec = WorkloadSpec { events, duration_ticks, ..WorkloadSpec::default() };
            let recording = workload::generate(&spec, seed);
            tracecloud_core::write_recording(&recording.header, &recording.events, &out)?;
            let size = std::fs::metadata(&out)?.len();
            println!(
                "{}: {} events over {:.3} s, {} bytes ({:.2} bytes/event)",
                out.display(),
                recording.events.len(),
                recording.header.duration_secs(),
                size,
                size as f64 / recording.events.len().max(1) as f64
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run { instances, sessions, reps, failover, restart_after_s, common } => {
            let config = BenchConfig::new(instances, sessions, reps);
            config.validate()?;
            let (opts, events) = (common.options()?, common.events()?);
            let result = if failover {
                let mut plan = FailoverPlan::new(DEFAULT_SEED);
                plan.restart_after = Duration::from_secs(restart_after_s);
                let mut result = ConfigResult { config, reps: Vec::with_capacity(reps) };
                for rep in 0..reps {
                    let (r, log) = run_repetition(&config, rep, events.clone(), &opts, Some(plan)).await?;
                    tracing::info!(rep, ?log, ok = r.ok(), "failover repetition done");
                    result.reps.push(r);
                }
                result
            } else {
                run_config(&config, events, &opts).await?
            };
            finish(&common.out, vec![result])
        }
        Cmd::Suite { reps, common } => {
            let (opts, events) = (common.options()?, common.events()?);
            let mut results = Vec::new();
            for config in reference_configs(reps) {
                tracing::info!(config = config.label(), "running");
                results.push(run_config(&config, events.clone(), &opts).await?);
            }
            finish(&common.out, results)
        }
    }
}

fn finish(out: &Path, results: Vec<ConfigResult>) -> anyhow::Result<ExitCode> {
    for path in write_report(out, &results)? {
        println!("wrote {}", path.display());
    }
    print!("{}", std::fs::read_to_string(out.join("table.csv"))?);
    let violations = check_invariants(&results, &Thresholds::default());
    for v in &violations {
        eprintln!("invariant violated: {v}");
    }
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
