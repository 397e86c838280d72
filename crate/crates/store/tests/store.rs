use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Barrier};
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracecloud_core::{EventKind, TraceEvent};
use tracecloud_store::{FieldUpdates, SessionState, SessionStore, StoreError, TraceStore};

use SessionState::*;

const LEGAL: [(SessionState, SessionState); 8] = [
    (Created, Starting),
    (Starting, Active),
    (Starting, Failed),
    (Active, Stopping),
    (Active, Completed),
    (Active, Interrupted),
    (Stopping, Completed),
    (Stopping, Interrupted),
];

/// Shortest legal path from CREATED to `target`.
fn path_to(target: SessionState) -> Vec<SessionState> {
    match target {
        Created => vec![],
        Starting => vec![Starting],
        Active => vec![Starting, Active],
        Stopping => vec![Starting, Active, Stopping],
        Completed => vec![Starting, Active, Completed],
        Interrupted => vec![Starting, Active, Interrupted],
        Failed => vec![Starting, Failed],
    }
}

fn drive(store: &SessionStore, tracer: &str, target: SessionState) -> u64 {
    let rec = store.create_session(tracer, 0).unwrap();
    let mut version = rec.state_version;
    for step in path_to(target) {
        version = store.cas_transition(rec.session_id, version, step, FieldUpdates::default()).unwrap().state_version;
    }
    rec.session_id
}

#[test]
fn transition_table_is_exact() {
    let store = SessionStore::open_in_memory().unwrap();
    let mut accepted = Vec::new();
    for (i, from) in SessionState::ALL.into_iter().enumerate() {
        for (j, to) in SessionState::ALL.into_iter().enumerate() {
            let tracer = format!("T{i}-{j}");
            store.upsert_tracer(&tracer, "file", 0).unwrap();
            let sid = drive(&store, &tracer, from);
            let before = store.get(sid).unwrap();
            match store.cas_transition(sid, before.state_version, to, FieldUpdates::default()) {
                Ok(after) => {
                    assert_eq!((after.state, after.state_version), (to, before.state_version + 1));
                    accepted.push((from, to));
                }
                Err(StoreError::IllegalTransition { from: f, to: t }) => {
                    assert_eq!((f, t), (from, to));
                    assert_eq!(store.get(sid).unwrap(), before);
                }
                Err(e) => panic!("{from}->{to}: {e}"),
            }
        }
    }
    assert_eq!(accepted, LEGAL.to_vec());
}

#[test]
fn cas_race_admits_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("sessions.db");
    let a = Arc::new(SessionStore::open(&db, false).unwrap());
    let b = Arc::new(SessionStore::open(&db, false).unwrap());
    a.upsert_tracer("T", "file", 0).unwrap();

    for trial in 0..1_000 {
        let rec = a.create_session("T", trial).unwrap();
        let sid = rec.session_id;
        let v = a.cas_transition(sid, 0, Starting, FieldUpdates::default()).unwrap().state_version;
        let barrier = Arc::new(Barrier::new(2));
        let racers: Vec<_> = [a.clone(), b.clone()]
            .into_iter()
            .map(|s| {
                let barrier = barrier.clone();
                thread::spawn(move || {
                    barrier.wait();
                    s.cas_transition(sid, v, Active, FieldUpdates::default())
                })
            })
            .collect();
        let results: Vec<_> = racers.into_iter().map(|h| h.join().unwrap()).collect();
        let wins = results.iter().filter(|r| r.is_ok()).count();
        assert_eq!(wins, 1, "trial {trial}: {results:?}");
        assert!(results.iter().any(|r| matches!(r, Err(StoreError::VersionConflict { .. }))));
        let after = a.get(sid).unwrap();
        assert_eq!((after.state, after.state_version), (Active, v + 1));
        a.cas_transition(sid, v + 1, Completed, FieldUpdates::default()).unwrap();
    }
}

fn workload(n: u64, seed: u64) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts = 0u64;
    (0..n)
        .map(|seq| {
            ts += rng.gen_range(0..600);
            let kind = EventKind::ALL[rng.gen_range(0..EventKind::ALL.len())];
            let ev = TraceEvent::new(ts, seq, kind, rng.gen_range(0..12));
            if rng.gen_bool(0.1) {
                ev.with_arg(rng.gen())
            } else {
                ev
            }
        })
        .collect()
}

#[test]
fn at_least_once_deliveries_store_each_seq_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (sid, n) in [(1u64, 1u64), (2, 777), (3, 20_000)] {
        let events = workload(n, sid);
        let mut deliveries = Vec::new();
        let mut lo = 0usize;
        while lo < events.len() {
            let hi = (lo + rng.gen_range(1..300)).min(events.len());
            deliveries.push(events[lo..hi].to_vec());
            if rng.gen_bool(0.3) {
                deliveries.push(events[lo..hi].to_vec());
            }
            lo = hi;
        }
        for _ in 0..deliveries.len() / 5 {
            let a = rng.gen_range(0..events.len());
            let b = (a + rng.gen_range(1..100)).min(events.len());
            deliveries.push(events[a..b].to_vec());
        }
        deliveries.shuffle(&mut rng);

        // Two independent store handles share the directory, as two service
        // processes would.
        let stores = [
            Arc::new(TraceStore::open(dir.path(), false).unwrap()),
            Arc::new(TraceStore::open(dir.path(), false).unwrap()),
        ];
        stores[0].create_session(sid).unwrap();
        let halves: Vec<Vec<Vec<TraceEvent>>> = vec![
            deliveries.iter().step_by(2).cloned().collect(),
            deliveries.iter().skip(1).step_by(2).cloned().collect(),
        ];
        let workers: Vec<_> = stores
            .iter()
            .cloned()
            .zip(halves)
            .map(|(store, batches)| {
                thread::spawn(move || {
                    batches.iter().map(|b| store.append_events(sid, b).unwrap().appended).sum::<u64>()
                })
            })
            .collect();
        let appended: u64 = workers.into_iter().map(|w| w.join().unwrap()).sum();

        let oracle: BTreeMap<u64, TraceEvent> = deliveries.into_iter().flatten().map(|e| (e.seq, e)).collect();
        assert_eq!(appended, oracle.len() as u64);
        let fresh = TraceStore::open(dir.path(), false).unwrap();
        assert_eq!(fresh.event_count(sid).unwrap(), n);
        let stored = fresh.query_events(sid, 0, u64::MAX, usize::MAX).unwrap();
        assert_eq!(stored, oracle.into_values().collect::<Vec<_>>());
    }
}

#[test]
fn query_windows_match_linear_scan() {
    let dir = tempfile::tempdir().unwrap();
    let store = TraceStore::open(dir.path(), false).unwrap();
    store.create_session(9).unwrap();
    let events = workload(100_000, 99);
    for chunk in events.chunks(64) {
        store.append_events(9, chunk).unwrap();
    }
    let end = events.last().unwrap().timestamp_ticks + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let a = rng.gen_range(0..end);
        let b = rng.gen_range(a..=end);
        let limit = if rng.gen_bool(0.5) { usize::MAX } else { rng.gen_range(0..5_000) };
        let mut oracle: Vec<TraceEvent> =
            events.iter().filter(|e| e.timestamp_ticks >= a && e.timestamp_ticks < b).cloned().collect();
        oracle.sort_by_key(|e| (e.timestamp_ticks, e.seq));
        oracle.truncate(limit);
        assert_eq!(store.query_events(9, a, b, limit).unwrap(), oracle, "window [{a}, {b}) limit {limit}");
    }
    assert_eq!(store.query_events(9, 0, end, usize::MAX).unwrap(), events);
    assert!(store.query_events(9, 500, 500, 10).unwrap().is_empty());
}

const CHILD_ENV: &str = "TRACECLOUD_STORE_CRASH_CHILD";

/// Writer half of the crash test: reports each durable step on stdout.
fn crash_child(dir: &Path) {
    let sessions = SessionStore::open(dir.join("sessions.db"), true).unwrap();
    let traces = TraceStore::open(dir.join("traces"), true).unwrap();
    sessions.upsert_tracer("T", "file", 0).unwrap();
    let sid = sessions.create_session("T", 0).unwrap().session_id;
    traces.create_session(sid).unwrap();
    let v = sessions.cas_transition(sid, 0, Starting, FieldUpdates::default()).unwrap().state_version;
    let v = sessions.cas_transition(sid, v, Active, FieldUpdates::default()).unwrap().state_version;
    println!("session {sid} {v}");
    let events = workload(1_000_000, 3);
    for chunk in events.chunks(50) {
        let out = traces.append_events(sid, chunk).unwrap();
        sessions.record_progress(sid, out.total, 1, 2).unwrap();
        println!("stored {}", out.total);
    }
}

#[test]
fn committed_writes_survive_hard_kill() {
    if let Ok(dir) = std::env::var(CHILD_ENV) {
        crash_child(Path::new(&dir));
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(std::env::current_exe().unwrap())
        .args(["committed_writes_survive_hard_kill", "--exact", "--nocapture", "--test-threads=1"])
        .env(CHILD_ENV, dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut session = None;
    let mut acked = 0u64;
    for line in lines.by_ref() {
        let line = line.unwrap();
        // libtest may prefix the first line with its own unterminated status text.
        let line = ["session ", "stored "].iter().find_map(|m| line.find(m).map(|i| &line[i..])).unwrap_or("");
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["session", sid, v] => session = Some((sid.parse::<u64>().unwrap(), v.parse::<u64>().unwrap())),
            ["stored", n] => {
                acked = n.parse().unwrap();
                if acked >= 5_000 {
                    break;
                }
            }
            _ => {}
        }
    }
    child.kill().unwrap();
    child.wait().unwrap();
    drop(lines);

    let (sid, version) = session.expect("child reported its session");
    let sessions = SessionStore::open(dir.path().join("sessions.db"), true).unwrap();
    let rec = sessions.get(sid).unwrap();
    assert_eq!((rec.state, rec.state_version), (Active, version));
    assert!(rec.event_count >= acked);

    let traces = TraceStore::open(dir.path().join("traces"), true).unwrap();
    let stored = traces.event_count(sid).unwrap();
    assert!(stored >= acked, "stored {stored} < acknowledged {acked}");
    let all = traces.query_events(sid, 0, u64::MAX, usize::MAX).unwrap();
    assert!(all.iter().enumerate().all(|(i, e)| e.seq == i as u64));
    // A restarted writer continues cleanly after any torn tail.
    let next = workload(stored + 10, 3);
    assert_eq!(traces.append_events(sid, &next).unwrap().total, stored + 10);
}
