//! Starting and stopping the gateway and the session-service instances.
//!
//! Child processes announce readiness with one JSON line on stdout, e.g.
//! `{"event":"ready","api_addr":"127.0.0.1:41234",...}`; everything else they
//! write goes to a log file in the work directory.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use serde_json::Value;
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};
use tracecloud_bus::BrokerConfig;
use tracecloud_gateway::{GatewayConfig, GatewayHandle};
use tracecloud_service::{ServiceConfig, ServiceHandle};

use crate::BenchError;

const READY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub enum Deployment {
    /// Gateway and services run as tasks of the harness process.
    InProcess,
    /// Gateway and services run as child processes.
    Processes { gateway_bin: PathBuf, service_bin: PathBuf, log_filter: String },
}

impl Deployment {
    /// Child processes using the `gateway` and `session-service` executables
    /// found next to the running one.
    pub fn sibling_binaries() -> Result<Self, BenchError> {
        let exe = std::env::current_exe()?;
        let dir = exe.parent().ok_or_else(|| BenchError::Startup("executable has no parent directory".into()))?;
        let find = |name: &str| -> Result<PathBuf, BenchError> {
            let path = dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX));
            if path.is_file() {
                Ok(path)
            } else {
                Err(BenchError::Startup(format!("{} not found", path.display())))
            }
        };
        Ok(Deployment::Processes {
            gateway_bin: find("gateway")?,
            service_bin: find("session-service")?,
            log_filter: "warn".into(),
        })
    }
}

enum GatewayNode {
    InProcess(GatewayHandle),
    Process(Child),
}

enum ServiceNode {
    InProcess(ServiceHandle),
    Process(Child),
}

struct ServiceSlot {
    instance_id: String,
    api_addr: Option<SocketAddr>,
    node: Option<ServiceNode>,
}

/// One gateway plus a fixed set of service instances sharing a data
/// directory.
pub struct Cluster {
    deployment: Deployment,
    work_dir: PathBuf,
    data_dir: PathBuf,
    gateway: Option<GatewayNode>,
    tracer_addr: SocketAddr,
    bus_addr: SocketAddr,
    services: Vec<ServiceSlot>,
}

impl Cluster {
    pub async fn start(deployment: &Deployment, instances: usize, work_dir: &Path) -> Result<Cluster, BenchError> {
        Self::start_on(deployment, instances, work_dir, loopback()).await
    }

    /// Like [`Cluster::start`], with the gateway's tracer endpoint bound to
    /// `gateway_listen`.
    pub async fn start_on(
        deployment: &Deployment,
        instances: usize,
        work_dir: &Path,
        gateway_listen: SocketAddr,
    ) -> Result<Cluster, BenchError> {
        let data_dir = work_dir.join("data");
        std::fs::create_dir_all(&data_dir)?;
        let (gateway, tracer_addr, bus_addr) = match deployment {
            Deployment::InProcess => {
                let handle = tracecloud_gateway::start(GatewayConfig {
                    listen: gateway_listen,
                    bus_listen: Some(loopback()),
                    broker: BrokerConfig::default(),
                })
                .await
                .map_err(|e| BenchError::Startup(format!("gateway: {e}")))?;
                let (t, b) = (handle.tracer_addr, handle.bus_addr.expect("bus listener requested"));
                (GatewayNode::InProcess(handle), t, b)
            }
            Deployment::Processes { gateway_bin, log_filter, .. } => {
                let mut cmd = Command::new(gateway_bin);
                cmd.env("GATEWAY_ADDR", gateway_listen.to_string())
                    .env("BUS_ADDR", "127.0.0.1:0")
                    .env("RUST_LOG", log_filter);
                let (child, ready) = spawn_ready(cmd, &work_dir.join("gateway.log")).await?;
                (GatewayNode::Process(child), addr_field(&ready, "tracer_addr")?, addr_field(&ready, "bus_addr")?)
            }
        };
        let mut cluster = Cluster {
            deployment: deployment.clone(),
            work_dir: work_dir.to_owned(),
            data_dir,
            gateway: Some(gateway),
            tracer_addr,
            bus_addr,
            services: (0..instances)
                .map(|i| ServiceSlot { instance_id: format!("svc-{i}"), api_addr: None, node: None })
                .collect(),
        };
        for i in 0..instances {
            cluster.start_service(i).await?;
        }
        Ok(cluster)
    }

    pub fn tracer_url(&self) -> String {
        format!("ws://{}/tracer", self.tracer_addr)
    }

    pub fn bus_addr(&self) -> SocketAddr {
        self.bus_addr
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn instances(&self) -> usize {
        self.services.len()
    }

    /// API base URLs of the instances currently running.
    pub fn api_urls(&self) -> Vec<String> {
        self.services
            .iter()
            .filter(|s| s.node.is_some())
            .filter_map(|s| s.api_addr.map(|a| format!("http://{a}")))
            .collect()
    }

    /// (Re)starts instance `i` under its fixed instance id.
    pub async fn start_service(&mut self, i: usize) -> Result<(), BenchError> {
        let slot = &mut self.services[i];
        if slot.node.is_some() {
            return Ok(());
        }
        let (node, api_addr) = match &self.deployment {
            Deployment::InProcess => {
                let mut config = ServiceConfig::new(self.bus_addr.to_string(), &self.data_dir);
                config.instance_id = slot.instance_id.clone();
                let handle = tracecloud_service::start(config)
                    .await
                    .map_err(|e| BenchError::Startup(format!("{}: {e}", slot.instance_id)))?;
                let addr = handle.api_addr;
                (ServiceNode::InProcess(handle), addr)
            }
            Deployment::Processes { service_bin, log_filter, .. } => {
                let mut cmd = Command::new(service_bin);
                cmd.env("BUS_ADDR", self.bus_addr.to_string())
                    .env("DATA_DIR", &self.data_dir)
                    .env("API_PORT", "0")
                    .env("INSTANCE_ID", &slot.instance_id)
                    .env("RUST_LOG", log_filter)
                    .args(["--api-host", "127.0.0.1"]);
                let log = self.work_dir.join(format!("{}.log", slot.instance_id));
                let (child, ready) = spawn_ready(cmd, &log).await?;
                (ServiceNode::Process(child), addr_field(&ready, "api_addr")?)
            }
        };
        slot.node = Some(node);
        slot.api_addr = Some(api_addr);
        tracing::info!(instance = slot.instance_id, %api_addr, "service instance up");
        Ok(())
    }

    /// Stops instance `i` without any chance to clean up: SIGKILL for child
    /// processes, task abort in-process.
    pub async fn kill_service(&mut self, i: usize) {
        let slot = &mut self.services[i];
        match slot.node.take() {
            Some(ServiceNode::Process(mut child)) => {
                let _ = child.start_kill();
                let _ = child.wait().await;
            }
            Some(ServiceNode::InProcess(handle)) => handle.shutdown().await,
            None => {}
        }
        tracing::info!(instance = slot.instance_id, "service instance killed");
    }

    pub async fn shutdown(mut self) {
        for i in 0..self.services.len() {
            self.kill_service(i).await;
        }
        match self.gateway.take() {
            Some(GatewayNode::Process(mut child)) => {
                let _ = child.start_kill();
                let _ = child.wait().await;
            }
            Some(GatewayNode::InProcess(handle)) => drop(handle),
            None => {}
        }
    }
}

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

fn addr_field(ready: &Value, field: &str) -> Result<SocketAddr, BenchError> {
    ready[field]
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| BenchError::Startup(format!("ready line lacks {field}: {ready}")))
}

/// Spawns `cmd` and waits for its JSON ready line.
async fn spawn_ready(mut cmd: Command, log: &Path) -> Result<(Child, Value), BenchError> {
    let log = std::fs::File::create(log)?;
    cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(log).kill_on_drop(true);
    let mut child = cmd.spawn()?;
    let stdout = child.stdout.take().expect("stdout piped");
    let mut lines = BufReader::new(stdout).lines();
    let line = tokio::time::timeout(READY_TIMEOUT, lines.next_line())
        .await
        .map_err(|_| BenchError::Startup("no ready line within 30 s".into()))??
        .ok_or_else(|| BenchError::Startup("child exited before becoming ready".into()))?;
    let ready: Value =
        serde_json::from_str(&line).map_err(|e| BenchError::Startup(format!("bad ready line {line:?}: {e}")))?;
    if ready["event"] != "ready" {
        return Err(BenchError::Startup(format!("unexpected first line {line:?}")));
    }
    // Keep draining so the child never blocks on a full pipe.
    tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
    Ok((child, ready))
}
