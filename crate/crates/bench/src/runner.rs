use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::task::JoinSet;
use tracecloud_core::{TraceEvent, TracerMode};
use tracecloud_service::ApiSession;
use tracecloud_store::{SessionState, TraceStore};
use tracecloud_tracer::{Tracer, TracerConfig};

use crate::deploy::{Cluster, Deployment};
use crate::report::{BenchConfig, ConfigResult, RepResult, SessionResult};
use crate::BenchError;

const POLL_INTERVAL: Duration = Duration::from_millis(250);
/// Fine enough that the stored fraction cannot jump past a kill threshold.
const KILL_POLL_INTERVAL: Duration = Duration::from_millis(20);
const TRACER_WAIT: Duration = Duration::from_secs(30);
/// Covers one full reconnect backoff cycle of a remote tracer.
const REMOTE_TRACER_WAIT: Duration = Duration::from_secs(120);
/// A COMPLETED session whose count stops growing for this long is short.
const SETTLE_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub deployment: Deployment,
    /// Parent of the per-repetition working directories.
    pub work_dir: PathBuf,
    /// Upper bound on one repetition once its sessions were started.
    pub run_timeout: Duration,
    pub keep_data: bool,
    /// Tracer endpoint of the gateway; loopback with an ephemeral port if
    /// unset.
    pub gateway_listen: Option<SocketAddr>,
    /// Tracers `tracer-0..` are started elsewhere and connect on their own.
    pub remote_tracers: bool,
}

impl RunOptions {
    pub fn new(deployment: Deployment, work_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            deployment,
            work_dir: work_dir.into(),
            run_timeout: Duration::from_secs(900),
            keep_data: false,
            gateway_listen: None,
            remote_tracers: false,
        }
    }
}

/// Kill one random instance once a random share of all events is stored,
/// and start it again after `restart_after`.
#[derive(Debug, Clone, Copy)]
pub struct FailoverPlan {
    pub seed: u64,
    pub restart_after: Duration,
}

impl FailoverPlan {
    pub fn new(seed: u64) -> Self {
        FailoverPlan { seed, restart_after: Duration::from_secs(5) }
    }
}

/// What a failover repetition actually did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailoverLog {
    pub instance: usize,
    /// Share of all expected events stored when the kill happened.
    pub killed_at_fraction: f64,
    pub restarted: bool,
}

pub async fn run_config(
    config: &BenchConfig,
    events: Arc<[TraceEvent]>,
    opts: &RunOptions,
) -> Result<ConfigResult, BenchError> {
    config.validate()?;
    let mut reps = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let (result, _) = run_repetition(config, rep, events.clone(), opts, None).await?;
        tracing::info!(
            config = config.label(),
            rep,
            ok = result.ok(),
            overall = result.overall_throughput(),
            per_session = result.throughput_per_session(),
            "repetition finished"
        );
        reps.push(result);
    }
    Ok(ConfigResult { config: *config, reps })
}

/// Small HTTP client that tries every live instance in turn.
struct Api {
    http: reqwest::Client,
}

impl Api {
    async fn call(
        &self,
        urls: &[String],
        method: reqwest::Method,
        path: &str,
        body: Option<Value>,
    ) -> Result<(u16, Value), BenchError> {
        let mut last = None;
        for base in urls {
            let mut req = self.http.request(method.clone(), format!("{base}{path}"));
            if let Some(b) = &body {
                req = req.json(b);
            }
            match req.send().await {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let value = resp.json().await.unwrap_or(Value::Null);
                    return Ok((status, value));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.map_or_else(|| BenchError::Startup("no service instance is running".into()), BenchError::Http))
    }

    async fn expect(
        &self,
        urls: &[String],
        method: reqwest::Method,
        path: &str,
        body: Option<Value>,
        want: u16,
    ) -> Result<Value, BenchError> {
        let (status, value) = self.call(urls, method, path, body).await?;
        if status != want {
            return Err(BenchError::Api { status, body: value.to_string() });
        }
        Ok(value)
    }
}

/// Runs one repetition on a fresh cluster and data directory.
pub async fn run_repetition(
    config: &BenchConfig,
    rep: usize,
    events: Arc<[TraceEvent]>,
    opts: &RunOptions,
    failover: Option<FailoverPlan>,
) -> Result<(RepResult, Option<FailoverLog>), BenchError> {
    let dir = opts.work_dir.join(format!("{}-rep{rep}", config.label()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let listen = opts.gateway_listen.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 0)));
    let mut cluster = Cluster::start_on(&opts.deployment, config.instances, &dir, listen).await?;
    let outcome = drive(&mut cluster, config, rep, events.clone(), opts, failover).await;
    let data_dir = cluster.data_dir().to_owned();
    cluster.shutdown().await;
    let (mut result, log) = outcome?;
    if failover.is_some() {
        result.duplicates = Some(count_duplicates(&data_dir, &result, &events)?);
    }
    if !opts.keep_data {
        let _ = std::fs::remove_dir_all(&dir);
    }
    Ok((result, log))
}

async fn drive(
    cluster: &mut Cluster,
    config: &BenchConfig,
    rep: usize,
    events: Arc<[TraceEvent]>,
    opts: &RunOptions,
    failover: Option<FailoverPlan>,
) -> Result<(RepResult, Option<FailoverLog>), BenchError> {
    let api = Api { http: reqwest::Client::builder().timeout(Duration::from_secs(30)).build()? };
    let expected = events.len() as u64;

    let mut tracers = JoinSet::new();
    let ids: Vec<String> = (0..config.sessions).map(|i| format!("tracer-{i}")).collect();
    for id in ids.iter().filter(|_| !opts.remote_tracers) {
        let tracer = Tracer::new(TracerConfig::new(id, cluster.tracer_url(), TracerMode::File), events.clone())
            .map_err(|e| BenchError::Startup(e.to_string()))?;
        tracers.spawn(async move { tracer.run().await });
    }

    if opts.remote_tracers {
        tracing::info!(url = cluster.tracer_url(), count = ids.len(), "waiting for remote tracers");
    }
    let deadline = Instant::now() + if opts.remote_tracers { REMOTE_TRACER_WAIT } else { TRACER_WAIT };
    loop {
        let tracers = api.expect(&cluster.api_urls(), reqwest::Method::GET, "/tracers", None, 200).await?;
        let connected = tracers.as_array().map_or(0, |a| a.iter().filter(|t| t["connected"] == true).count());
        if connected >= ids.len() {
            break;
        }
        if Instant::now() > deadline {
            return Err(BenchError::Startup(format!("only {connected} of {} tracers connected", ids.len())));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }

    // Creation and start are spread over the instances.
    let urls = cluster.api_urls();
    let mut session_ids = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let target = rotate(&urls, i);
        let s = api.expect(&target, reqwest::Method::POST, "/sessions", Some(json!({ "tracer_id": id })), 201).await?;
        session_ids.push(s["session_id"].as_u64().ok_or_else(|| BenchError::Api { status: 201, body: s.to_string() })?);
    }
    let mut starts = JoinSet::new();
    for (i, sid) in session_ids.iter().copied().enumerate() {
        let target = rotate(&urls, i);
        let http = api.http.clone();
        starts.spawn(async move {
            Api { http }.expect(&target, reqwest::Method::POST, &format!("/sessions/{sid}/start"), None, 200).await
        });
    }
    while let Some(res) = starts.join_next().await {
        res.expect("start task panicked")?;
    }

    let mut rng = failover.map(|p| ChaCha8Rng::seed_from_u64(p.seed ^ rep as u64));
    let kill_plan = rng.as_mut().map(|r| (r.gen_range(0..config.instances), r.gen_range(0.1..0.8)));
    let mut log: Option<FailoverLog> = None;
    let mut killed_at: Option<Instant> = None;

    let total_expected = expected * session_ids.len() as u64;
    let deadline = Instant::now() + opts.run_timeout;
    let mut last_total = 0;
    let mut last_progress = Instant::now();
    let mut failure = None;
    let sessions = loop {
        let kill_pending = kill_plan.is_some() && log.is_none();
        tokio::time::sleep(if kill_pending { KILL_POLL_INTERVAL } else { POLL_INTERVAL }).await;
        let urls = cluster.api_urls();
        let list: Vec<ApiSession> = match api.call(&urls, reqwest::Method::GET, "/sessions", None).await {
            Ok((200, v)) => {
                serde_json::from_value(v).map_err(|e| BenchError::Api { status: 200, body: e.to_string() })?
            }
            Ok((status, v)) => return Err(BenchError::Api { status, body: v.to_string() }),
            Err(e) => {
                tracing::warn!(error = %e, "session poll failed");
                continue;
            }
        };
        let ours: Vec<ApiSession> = list.into_iter().filter(|s| session_ids.contains(&s.session_id)).collect();
        let total: u64 = ours.iter().map(|s| s.event_count).sum();
        tracing::debug!(total, sessions = ours.len(), "poll");
        if total != last_total {
            last_total = total;
            last_progress = Instant::now();
        }

        if let (Some((instance, fraction)), None) = (kill_plan, log) {
            if total as f64 >= fraction * total_expected as f64 {
                cluster.kill_service(instance).await;
                killed_at = Some(Instant::now());
                log = Some(FailoverLog {
                    instance,
                    killed_at_fraction: total as f64 / total_expected as f64,
                    restarted: false,
                });
            }
        }
        if let (Some(at), Some(l), Some(plan)) = (killed_at, log.as_mut(), failover) {
            if !l.restarted && at.elapsed() >= plan.restart_after {
                cluster.start_service(l.instance).await?;
                l.restarted = true;
            }
        }
        let failover_pending = log.is_some_and(|l| !l.restarted) || (kill_plan.is_some() && log.is_none());

        let all_terminal = ours.len() == session_ids.len() && ours.iter().all(|s| s.state.is_terminal());
        let complete = ours.iter().all(|s| s.state != SessionState::Completed || s.event_count >= expected);
        if all_terminal && complete && !failover_pending {
            break ours;
        }
        if all_terminal && !failover_pending && last_progress.elapsed() > SETTLE_TIMEOUT {
            failure = Some("completed sessions stopped short of the full event count".to_owned());
            break ours;
        }
        if all_terminal && complete && kill_plan.is_some() && log.is_none() {
            // Everything was stored before the kill threshold was reached.
            let (instance, _) = kill_plan.expect("checked");
            cluster.kill_service(instance).await;
            killed_at = Some(Instant::now());
            log = Some(FailoverLog { instance, killed_at_fraction: 1.0, restarted: false });
        }
        if Instant::now() > deadline {
            failure = Some(format!("timed out after {:?}", opts.run_timeout));
            break ours;
        }
    };
    tracers.abort_all();

    let urls = cluster.api_urls();
    let mut results = Vec::with_capacity(sessions.len());
    for s in sessions {
        let (status, stats) =
            api.call(&urls, reqwest::Method::GET, &format!("/sessions/{}/stats", s.session_id), None).await?;
        let ok = status == 200;
        results.push(SessionResult {
            session_id: s.session_id,
            tracer_id: s.tracer_id,
            state: s.state,
            event_count: s.event_count,
            first_event_at_us: s.first_event_at_us,
            last_event_at_us: s.last_event_at_us,
            processing_time_ms: if ok { stats["processing_time_ms"].as_f64() } else { None },
            throughput_eps: if ok { stats["throughput_eps"].as_f64() } else { None },
        });
    }
    if failure.is_none() {
        if let Some(s) = results.iter().find(|s| s.state != SessionState::Completed) {
            failure = Some(format!("session {} ended {}", s.session_id, s.state.as_str()));
        }
    }
    let result = RepResult { repetition: rep, sessions: results, expected_events: expected, failure, duplicates: None };
    Ok((result, log))
}

fn rotate(urls: &[String], i: usize) -> Vec<String> {
    let n = urls.len().max(1);
    urls.iter().cycle().skip(i % n).take(urls.len()).cloned().collect()
}

/// Physically stored events that repeat a `(session, seq)` pair or differ
/// from the recording. Reads the trace store directly.
fn count_duplicates(data_dir: &std::path::Path, result: &RepResult, events: &[TraceEvent]) -> Result<u64, BenchError> {
    let store = TraceStore::open(data_dir.join("traces"), false)?;
    let mut bad = 0u64;
    for s in &result.sessions {
        if !store.exists(s.session_id) {
            continue;
        }
        let physical: u64 = store.blocks(s.session_id)?.iter().map(|b| u64::from(b.count)).sum();
        let stored = store.query_events(s.session_id, 0, u64::MAX, usize::MAX)?;
        let distinct: BTreeSet<u64> = stored.iter().map(|e| e.seq).collect();
        bad += physical - distinct.len() as u64;
        bad += stored.iter().filter(|e| events.get(e.seq as usize) != Some(e)).count() as u64;
    }
    Ok(bad)
}
