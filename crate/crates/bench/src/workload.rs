//! Synthetic RTOS workload standing in for a recorded application trace.
//!
//! A small fixed-priority system: six tasks and three interrupt sources.
//! Interrupts make tasks ready, the scheduler switches between them, and
//! tasks occasionally emit user markers. Raw inter-event gaps are drawn per
//! event type and then rescaled so the last event lands exactly on the
//! recording's duration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracecloud_core::{EventKind, Recording, TraceEvent};

pub const REFERENCE_EVENTS: usize = 31_726;
pub const REFERENCE_TICK_RATE_HZ: u32 = 1_000_000;
pub const REFERENCE_DURATION_TICKS: u64 = 10_012_000;
pub const DEFAULT_SEED: u64 = 42;

const TASKS: u32 = 6;
/// Actor ids of interrupt sources start here.
const ISR_BASE: u32 = 32;
const ISRS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub events: usize,
    pub tick_rate_hz: u32,
    pub duration_ticks: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            events: REFERENCE_EVENTS,
            tick_rate_hz: REFERENCE_TICK_RATE_HZ,
            duration_ticks: REFERENCE_DURATION_TICKS,
        }
    }
}

/// The reference recording for `seed`.
pub fn reference_recording(seed: u64) -> Recording {
    generate(&WorkloadSpec::default(), seed)
}

/// Deterministic for a given `spec` and `seed`.
pub fn generate(spec: &WorkloadSpec, seed: u64) -> Recording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw: Vec<(u64, EventKind, u32, Option<u32>)> = Vec::with_capacity(spec.events + 8);
    let mut running = 0u32;
    let mut ready: Vec<u32> = Vec::new();
    raw.push((0, EventKind::TaskStartExec, running, None));

    while raw.len() < spec.events {
        match rng.gen_range(0..100) {
            // Interrupt, usually readying a task.
            0..=44 => {
                let isr = ISR_BASE + rng.gen_range(0..ISRS);
                raw.push((rng.gen_range(150..900), EventKind::IsrEnter, isr, None));
                raw.push((rng.gen_range(8..90), EventKind::IsrExit, isr, None));
                if rng.gen_bool(0.7) {
                    let t = rng.gen_range(0..TASKS);
                    if t != running && !ready.contains(&t) {
                        ready.push(t);
                        raw.push((rng.gen_range(2..30), EventKind::TaskReady, t, None));
                    }
                }
            }
            // Context switch to a ready task, or to the idle task.
            45..=84 => {
                let next = if ready.is_empty() { 0 } else { ready.remove(rng.gen_range(0..ready.len())) };
                if next != running {
                    raw.push((rng.gen_range(200..1200), EventKind::TaskStopExec, running, None));
                    raw.push((rng.gen_range(3..40), EventKind::TaskStartExec, next, None));
                    running = next;
                }
            }
            // Application marker with a small payload.
            _ => {
                let value = rng.gen_range(0..4096);
                raw.push((rng.gen_range(100..700), EventKind::UserMarker, running, Some(value)));
            }
        }
    }
    raw.truncate(spec.events);

    let timestamps = rescale(raw.iter().map(|r| r.0).collect(), spec.duration_ticks);
    let events = raw
        .iter()
        .zip(timestamps)
        .enumerate()
        .map(|(seq, (&(_, kind, actor, arg), ts))| {
            let ev = TraceEvent::new(ts, seq as u64, kind, actor);
            match arg {
                Some(a) => ev.with_arg(a),
                None => ev,
            }
        })
        .collect();
    Recording::new(spec.tick_rate_hz, spec.duration_ticks, events)
}

/// Turns gaps into absolute timestamps starting at 0 whose last value is
/// exactly `duration`. The first gap is ignored.
fn rescale(gaps: Vec<u64>, duration: u64) -> Vec<u64> {
    if gaps.len() <= 1 {
        return vec![0; gaps.len()];
    }
    let total: u64 = gaps[1..].iter().sum();
    let mut out = Vec::with_capacity(gaps.len());
    out.push(0);
    let mut acc = 0u128;
    for g in &gaps[1..] {
        acc += u128::from(*g);
        out.push((acc * u128::from(duration) / u128::from(total.max(1))) as u64);
    }
    out
}
