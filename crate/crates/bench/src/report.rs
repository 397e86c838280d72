//! Result aggregation and the CSV outputs.
//!
//! Overall throughput of a repetition is the total number of stored events
//! divided by the span from the earliest first stored event to the latest
//! last stored event across all of its sessions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tracecloud_store::SessionState;

use crate::BenchError;

/// Histogram bins per distribution file.
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct BenchConfig {
    pub instances: usize,
    pub sessions: usize,
    pub repetitions: usize,
}

impl BenchConfig {
    pub fn new(instances: usize, sessions: usize, repetitions: usize) -> Self {
        BenchConfig { instances, sessions, repetitions }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.instances == 0 || self.sessions == 0 || self.repetitions == 0 {
            return Err(BenchError::Usage("instances, sessions and repetitions must all be at least 1".into()));
        }
        Ok(())
    }

    /// Short name used in file names, e.g. `i3_s50`.
    pub fn label(&self) -> String {
        format!("i{}_s{}", self.instances, self.sessions)
    }
}

/// The six configurations of the reference experiment.
pub fn reference_configs(repetitions: usize) -> Vec<BenchConfig> {
    [(1, 1), (1, 50), (3, 1), (3, 50), (5, 1), (5, 50)]
        .into_iter()
        .map(|(i, s)| BenchConfig::new(i, s, repetitions))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionResult {
    pub session_id: u64,
    pub tracer_id: String,
    pub state: SessionState,
    pub event_count: u64,
    pub first_event_at_us: Option<u64>,
    pub last_event_at_us: Option<u64>,
    pub processing_time_ms: Option<f64>,
    pub throughput_eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepResult {
    pub repetition: usize,
    pub sessions: Vec<SessionResult>,
    pub expected_events: u64,
    /// Why the repetition does not count, if it does not.
    pub failure: Option<String>,
    /// Stored events that were not distinct `(session, seq)` pairs; only
    /// checked on failover runs.
    pub duplicates: Option<u64>,
}

impl RepResult {
    pub fn total_events(&self) -> u64 {
        self.sessions.iter().map(|s| s.event_count).sum()
    }

    /// Every session COMPLETED with exactly the expected count.
    pub fn conserved(&self) -> bool {
        self.sessions.iter().all(|s| s.state == SessionState::Completed && s.event_count == self.expected_events)
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none() && self.conserved() && self.duplicates.unwrap_or(0) == 0
    }

    pub fn throughput_per_session(&self) -> Option<f64> {
        mean(self.sessions.iter().filter_map(|s| s.throughput_eps))
    }

    pub fn overall_throughput(&self) -> Option<f64> {
        let first = self.sessions.iter().filter_map(|s| s.first_event_at_us).min()?;
        let last = self.sessions.iter().filter_map(|s| s.last_event_at_us).max()?;
        let span_s = (last.saturating_sub(first) as f64 / 1e6).max(1e-3);
        Some(self.total_events() as f64 / span_s)
    }

    pub fn processing_times_ms(&self) -> impl Iterator<Item = f64> + '_ {
        self.sessions.iter().filter_map(|s| s.processing_time_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigResult {
    pub config: BenchConfig,
    pub reps: Vec<RepResult>,
}

impl ConfigResult {
    pub fn failed_reps(&self) -> usize {
        self.reps.iter().filter(|r| !r.ok()).count()
    }

    pub fn all_ok(&self) -> bool {
        !self.reps.is_empty() && self.failed_reps() == 0
    }

    /// Mean over repetitions of the per-repetition mean session throughput.
    pub fn throughput_per_session(&self) -> Option<f64> {
        mean(self.reps.iter().filter_map(RepResult::throughput_per_session))
    }

    /// Mean over repetitions of the overall throughput.
    pub fn overall_throughput(&self) -> Option<f64> {
        mean(self.reps.iter().filter_map(RepResult::overall_throughput))
    }

    pub fn processing_times_ms(&self) -> Vec<f64> {
        self.reps.iter().flat_map(RepResult::processing_times_ms).collect()
    }

    pub fn mean_processing_time_ms(&self) -> Option<f64> {
        mean(self.processing_times_ms().into_iter())
    }

    /// Coefficient of variation of the processing times.
    pub fn processing_time_cv(&self) -> Option<f64> {
        let xs = self.processing_times_ms();
        let m = mean(xs.iter().copied())?;
        if xs.len() < 2 || m == 0.0 {
            return None;
        }
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        Some(var.sqrt() / m)
    }
}

pub fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub start_ms: f64,
    pub end_ms: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; the last bin is closed. Counts sum
/// to `samples.len()`.
pub fn histogram(samples: &[f64], bins: usize) -> Vec<Bin> {
    if samples.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin { start_ms: lo + width * i as f64, end_ms: lo + width * (i + 1) as f64, count: 0 })
        .collect();
    for &x in samples {
        let i = (((x - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.1}"))
}

/// Table shaped like the reference results table, one row per config.
pub fn table_csv(results: &[ConfigResult]) -> String {
    let mut out =
        String::from("# overall_throughput = total stored events / (latest last_event_at - earliest first_event_at)\n");
    out.push_str(
        "config_no,instances,sessions,throughput_per_session_eps,overall_throughput_eps,\
         mean_processing_time_ms,repetitions,failed_repetitions\n",
    );
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            i + 1,
            r.config.instances,
            r.config.sessions,
            fmt_opt(r.throughput_per_session()),
            fmt_opt(r.overall_throughput()),
            fmt_opt(r.mean_processing_time_ms()),
            r.reps.len(),
            r.failed_reps(),
        );
    }
    out
}

pub fn histogram_csv(result: &ConfigResult) -> String {
    let mut out = String::from("bin_start_ms,bin_end_ms,count\n");
    for b in histogram(&result.processing_times_ms(), HISTOGRAM_BINS) {
        let _ = writeln!(out, "{:.3},{:.3},{}", b.start_ms, b.end_ms, b.count);
    }
    out
}

pub fn samples_csv(result: &ConfigResult) -> String {
    let mut out = String::from("repetition,session_id,state,event_count,processing_time_ms,throughput_eps\n");
    for rep in &result.reps {
        for s in &rep.sessions {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                rep.repetition,
                s.session_id,
                s.state.as_str(),
                s.event_count,
                s.processing_time_ms.map_or_else(String::new, |v| format!("{v:.3}")),
                fmt_opt(s.throughput_eps),
            );
        }
    }
    out
}

/// Writes `table.csv`, and per config `proc_times_<label>.csv` (histogram)
/// and `proc_samples_<label>.csv` (raw samples). Returns the written paths.
pub fn write_report(dir: &Path, results: &[ConfigResult]) -> Result<Vec<PathBuf>, BenchError> {
    if results.is_empty() {
        return Err(BenchError::Usage("no results to report".into()));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), BenchError> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("table.csv".into(), table_csv(results))?;
    for r in results {
        put(format!("proc_times_{}.csv", r.config.label()), histogram_csv(r))?;
        put(format!("proc_samples_{}.csv", r.config.label()), samples_csv(r))?;
    }
    put("results.json".into(), serde_json::to_string_pretty(results).expect("results serialize"))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(id: u64, first: u64, last: u64, count: u64) -> SessionResult {
        let ms = (last - first) as f64 / 1e3;
        SessionResult {
            session_id: id,
            tracer_id: format!("T{id}"),
            state: SessionState::Completed,
            event_count: count,
            first_event_at_us: Some(first),
            last_event_at_us: Some(last),
            processing_time_ms: Some(ms),
            throughput_eps: Some(count as f64 / (ms / 1e3)),
        }
    }

    #[test]
    fn overall_throughput_spans_the_cohort() {
        let rep = RepResult {
            repetition: 0,
            sessions: vec![session(1, 0, 1_000_000, 1000), session(2, 500_000, 2_000_000, 1000)],
            expected_events: 1000,
            failure: None,
            duplicates: None,
        };
        assert_eq!(rep.overall_throughput(), Some(1000.0));
        assert_eq!(rep.throughput_per_session(), Some((1000.0 + 1000.0 / 1.5) / 2.0));
        assert!(rep.overall_throughput().unwrap() >= rep.throughput_per_session().unwrap());
        assert!(rep.ok());
    }

    #[test]
    fn short_counts_fail_conservation() {
        let rep = RepResult {
            repetition: 0,
            sessions: vec![session(1, 0, 10, 999)],
            expected_events: 1000,
            failure: None,
            duplicates: None,
        };
        assert!(!rep.conserved());
        assert!(!rep.ok());
    }

    #[test]
    fn histogram_conserves_samples() {
        let xs: Vec<f64> = (0..137).map(|i| (i * i) as f64 / 7.0).collect();
        let h = histogram(&xs, HISTOGRAM_BINS);
        assert_eq!(h.len(), HISTOGRAM_BINS);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), xs.len());
        let single = histogram(&[5.0, 5.0], 4);
        assert_eq!(single.iter().map(|b| b.count).sum::<usize>(), 2);
    }

    #[test]
    fn table_has_one_row_per_config() {
        let results: Vec<ConfigResult> =
            reference_configs(1).into_iter().map(|config| ConfigResult { config, reps: Vec::new() }).collect();
        let table = table_csv(&results);
        assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 7);
        assert!(table.contains("throughput_per_session_eps,overall_throughput_eps"));
    }

    #[test]
    fn empty_results_are_refused() {
        let dir = std::env::temp_dir();
        assert!(matches!(write_report(&dir, &[]), Err(BenchError::Usage(_))));
    }
}
