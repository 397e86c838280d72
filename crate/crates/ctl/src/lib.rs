//! `ctl`: operator client for the session-service HTTP API.
//!
//! Each subcommand is one request. JSON output prints the response body
//! unchanged; table output renders the same fields as aligned columns.

mod render;

use std::io::Write;
use std::time::Duration;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde_json::Value;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
/// Usage errors, server errors, malformed responses and local I/O failures.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_UNREACHABLE: i32 = 2;
pub const EXIT_REJECTED: i32 = 3;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  usage error, server error (5xx), unreadable response or local failure
  2  API unreachable (connection refused, timeout)
  3  request rejected (4xx); the server message is printed to stderr";

#[derive(Debug, Parser)]
#[command(name = "ctl", version, about = "Operate trace sessions through the session-service API", after_help = EXIT_CODES)]
pub struct Cli {
    /// Base URL of a session-service instance.
    #[arg(long, env = "API_URL", default_value = "http://127.0.0.1:8080")]
    pub api: String,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 30)]
    pub timeout: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// List known tracers.
    Tracers,
    /// List all sessions.
    Sessions,
    /// Show one session.
    Show { session: u64 },
    /// Create a session for a connected tracer.
    Create { tracer_id: String },
    /// Start tracing for a session.
    Start { session: u64 },
    /// Stop tracing for a session.
    Stop { session: u64 },
    /// Event count, processing time and throughput of a session.
    Stats { session: u64 },
    /// Stored events with timestamps in `[from, to)` ticks, in order.
    Events {
        session: u64,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Error)]
pub enum CtlError {
    #[error("cannot reach {url}: {source}")]
    Unreachable { url: String, source: reqwest::Error },
    #[error("{status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("api url must not be empty")]
    EmptyUrl,
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error("unreadable response: {0}")]
    Body(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CtlError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CtlError::Unreachable { .. } => EXIT_UNREACHABLE,
            CtlError::Rejected { .. } => EXIT_REJECTED,
            _ => EXIT_FAILURE,
        }
    }
}

/// Runs one command, writing its output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CtlError> {
    let base = cli.api.trim_end_matches('/');
    if base.is_empty() {
        return Err(CtlError::EmptyUrl);
    }
    let client = Client::builder().timeout(Duration::from_secs(cli.timeout)).build()?;
    let url = |path: &str| format!("{base}{path}");
    let request = match &cli.command {
        Command::Tracers => client.get(url("/tracers")),
        Command::Sessions => client.get(url("/sessions")),
        Command::Show { session } => client.get(url(&format!("/sessions/{session}"))),
        Command::Create { tracer_id } => {
            client.post(url("/sessions")).json(&serde_json::json!({ "tracer_id": tracer_id }))
        }
        Command::Start { session } => client.post(url(&format!("/sessions/{session}/start"))),
        Command::Stop { session } => client.post(url(&format!("/sessions/{session}/stop"))),
        Command::Stats { session } => client.get(url(&format!("/sessions/{session}/stats"))),
        Command::Events { session, from, to, limit } => {
            let query: Vec<String> = [("from", *from), ("to", *to), ("limit", limit.map(|l| l as u64))]
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
                .collect();
            let sep = if query.is_empty() { "" } else { "?" };
            client.get(url(&format!("/sessions/{session}/events{sep}{}", query.join("&"))))
        }
    };
    let response = request.send().map_err(|e| {
        if e.is_connect() || e.is_timeout() {
            CtlError::Unreachable { url: base.to_owned(), source: e }
        } else {
            CtlError::Http(e)
        }
    })?;
    let body = checked_body(response)?;
    match cli.format {
        Format::Json => out.write_all(&body)?,
        Format::Table => {
            let value: Value = serde_json::from_slice(&body)?;
            out.write_all(render::table(&cli.command, &value).as_bytes())?;
        }
    }
    Ok(())
}

fn checked_body(response: Response) -> Result<Vec<u8>, CtlError> {
    let status = response.status();
    let body = response.bytes()?.to_vec();
    if status.is_success() {
        return Ok(body);
    }
    let message = serde_json::from_slice::<Value>(&body)
        .ok()
        .and_then(|v| v["error"].as_str().map(str::to_owned))
        .unwrap_or_else(|| String::from_utf8_lossy(&body).trim().to_owned());
    let code = status.as_u16();
    if status.is_client_error() {
        Err(CtlError::Rejected { status: code, message })
    } else {
        let message = if message.is_empty() { canonical(status) } else { message };
        Err(CtlError::Server { status: code, message })
    }
}

fn canonical(status: StatusCode) -> String {
    status.canonical_reason().unwrap_or("unknown status").to_owned()
}

/// The long `--help` text, exit codes included.
pub fn help() -> String {
    Cli::command().render_long_help().to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors go to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("ctl: {e}");
            e.exit_code()
        }
    }
}
