//! Benchmark harness.
//!
//! Generates the reference workload, brings up a gateway and `instances`
//! session services, replays the workload from one in-process tracer per
//! session in file mode, waits for every session to finish and reports the
//! processing-time and throughput figures read back from the API.
//!
//! ```no_run
//! # async fn demo() -> Result<(), tracecloud_bench::BenchError> {
//! use tracecloud_bench::*;
//! let recording = workload::reference_recording(workload::DEFAULT_SEED);
//! let opts = RunOptions::new(Deployment::sibling_binaries()?, "bench-out/work");
//! let result = run_config(&BenchConfig::new(1, 1, 10), recording.events.into(), &opts).await?;
//! write_report("bench-out".as_ref(), &[result])?;
//! # Ok(()) }
//! ```

pub mod deploy;
pub mod report;
pub mod runner;
pub mod workload;

use thiserror::Error;

pub use deploy::{Cluster, Deployment};
pub use report::{reference_configs, write_report, BenchConfig, ConfigResult, RepResult, SessionResult};
pub use runner::{run_config, run_repetition, FailoverLog, FailoverPlan, RunOptions};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("api returned {status}: {body}")]
    Api { status: u16, body: String },
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Recording(#[from] tracecloud_core::RecordingError),
    #[error(transparent)]
    Store(#[from] tracecloud_store::StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Margins the scaling and contention checks must clear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Overall throughput of 3 instances over 1, with 50 sessions.
    pub scale_3: f64,
    /// Overall throughput of 5 instances over 1, with 50 sessions.
    pub scale_5: f64,
    /// Upper bound on per-session throughput at 50 sessions relative to 1
    /// session, same instance count.
    pub contention: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { scale_3: 1.5, scale_5: 2.0, contention: 0.5 }
    }
}

/// Violated invariants over a set of results, as readable messages. Checks
/// only what the given configs allow.
pub fn check_invariants(results: &[ConfigResult], t: &Thresholds) -> Vec<String> {
    let mut out = Vec::new();
    for r in results {
        for rep in &r.reps {
            if !rep.ok() {
                out.push(format!(
                    "{} rep {}: {}",
                    r.config.label(),
                    rep.repetition,
                    rep.failure.clone().unwrap_or_else(|| format!(
                        "event conservation violated ({} of {} events, duplicates {:?})",
                        rep.total_events(),
                        rep.expected_events * rep.sessions.len() as u64,
                        rep.duplicates
                    ))
                ));
            }
        }
    }
    let find = |i: usize, s: usize| results.iter().find(|r| r.config.instances == i && r.config.sessions == s);
    let overall = |i| find(i, 50).and_then(ConfigResult::overall_throughput);
    if let Some(base) = overall(1) {
        for (n, margin) in [(3, t.scale_3), (5, t.scale_5)] {
            if let Some(v) = overall(n) {
                if v < margin * base {
                    out.push(format!(
                        "overall throughput with {n} instances is {:.2}x of 1 instance, want >= {margin}x",
                        v / base
                    ));
                }
            }
        }
    }
    for i in [1, 3, 5] {
        let single = find(i, 1).and_then(ConfigResult::throughput_per_session);
        let many = find(i, 50).and_then(ConfigResult::throughput_per_session);
        if let (Some(one), Some(fifty)) = (single, many) {
            let bound = if i == 1 { t.contention } else { 1.0 };
            if fifty >= bound * one {
                out.push(format!(
                    "per-session throughput with {i} instances: 50 sessions {fifty:.0} eps vs 1 session {one:.0} eps, want < {bound}x"
                ));
            }
        }
    }
    out
}
