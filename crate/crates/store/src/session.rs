use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, Row, Transaction, TransactionBehavior};
use serde::Serialize;

use crate::error::StoreError;
use crate::state::SessionState;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS sessions (
    session_id     INTEGER PRIMARY KEY AUTOINCREMENT,
    tracer_id      TEXT    NOT NULL,
    state          TEXT    NOT NULL,
    state_version  INTEGER NOT NULL,
    created_at     INTEGER NOT NULL,
    started_at     INTEGER,
    completed_at   INTEGER,
    first_event_at INTEGER,
    last_event_at  INTEGER,
    event_count    INTEGER NOT NULL DEFAULT 0,
    error_detail   TEXT
);
CREATE INDEX IF NOT EXISTS sessions_by_tracer ON sessions(tracer_id, state);
CREATE TABLE IF NOT EXISTS tracers (
    tracer_id      TEXT PRIMARY KEY,
    mode           TEXT    NOT NULL,
    connected_at   INTEGER NOT NULL,
    connected      INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS requests (
    request_id     INTEGER PRIMARY KEY,
    session_id     INTEGER NOT NULL,
    tracer_id      TEXT    NOT NULL,
    action         TEXT    NOT NULL,
    created_at     INTEGER NOT NULL,
    first_response_offset INTEGER
);
CREATE TABLE IF NOT EXISTS counters (
    name  TEXT PRIMARY KEY,
    value INTEGER NOT NULL
);
";

const SESSION_COLUMNS: &str = "session_id, tracer_id, state, state_version, created_at, started_at, completed_at, \
     first_event_at, last_event_at, event_count, error_detail";

/// Wall-clock time in microseconds since the Unix epoch.
pub fn now_micros() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}

/// Persisted session metadata. All `*_at` fields are wall-clock microseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionRecord {
    pub session_id: u64,
    pub tracer_id: String,
    pub state: SessionState,
    pub state_version: u64,
    pub created_at: u64,
    pub started_at: Option<u64>,
    pub completed_at: Option<u64>,
    pub first_event_at: Option<u64>,
    pub last_event_at: Option<u64>,
    pub event_count: u64,
    pub error_detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SessionStats {
    pub event_count: u64,
    pub processing_time_ms: f64,
    pub throughput_eps: f64,
}

impl SessionStats {
    /// Processing time is floored at 1 ms.
    pub fn compute(event_count: u64, processing_time: Duration) -> SessionStats {
        let floored = processing_time.max(Duration::from_millis(1));
        SessionStats {
            event_count,
            processing_time_ms: floored.as_secs_f64() * 1e3,
            throughput_eps: event_count as f64 / floored.as_secs_f64(),
        }
    }
}

impl SessionRecord {
    pub fn processing_time(&self) -> Option<Duration> {
        match (self.first_event_at, self.last_event_at) {
            (Some(first), Some(last)) => Some(Duration::from_micros(last.saturating_sub(first))),
            _ => None,
        }
    }

    pub fn stats(&self) -> Result<SessionStats, StoreError> {
        match self.processing_time() {
            Some(t) if self.event_count > 0 => Ok(SessionStats::compute(self.event_count, t)),
            _ => Err(StoreError::NoEvents(self.session_id)),
        }
    }

    fn from_row(row: &Row<'_>) -> rusqlite::Result<SessionRecord> {
        let state: String = row.get(2)?;
        let state = SessionState::from_str(&state)
            .map_err(|e| rusqlite::Error::FromSqlConversionFailure(2, rusqlite::types::Type::Text, e.into()))?;
        Ok(SessionRecord {
            session_id: row.get::<_, i64>(0)? as u64,
            tracer_id: row.get(1)?,
            state,
            state_version: row.get::<_, i64>(3)? as u64,
            created_at: row.get::<_, i64>(4)? as u64,
            started_at: row.get::<_, Option<i64>>(5)?.map(|v| v as u64),
            completed_at: row.get::<_, Option<i64>>(6)?.map(|v| v as u64),
            first_event_at: row.get::<_, Option<i64>>(7)?.map(|v| v as u64),
            last_event_at: row.get::<_, Option<i64>>(8)?.map(|v| v as u64),
            event_count: row.get::<_, i64>(9)? as u64,
            error_detail: row.get(10)?,
        })
    }
}

/// Optional column writes applied together with a state transition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FieldUpdates {
    pub started_at: Option<u64>,
    pub completed_at: Option<u64>,
    pub error_detail: Option<String>,
}

impl FieldUpdates {
    pub fn started(at: u64) -> Self {
        FieldUpdates { started_at: Some(at), ..Default::default() }
    }

    pub fn completed(at: u64) -> Self {
        FieldUpdates { completed_at: Some(at), ..Default::default() }
    }

    pub fn failed(at: u64, detail: impl Into<String>) -> Self {
        FieldUpdates { completed_at: Some(at), error_detail: Some(detail.into()), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TracerInfo {
    pub tracer_id: String,
    pub mode: String,
    pub connected_at: u64,
    pub connected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestAction {
    Start,
    Stop,
}

impl RequestAction {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestAction::Start => "start",
            RequestAction::Stop => "stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub session_id: u64,
    pub tracer_id: String,
    pub action: RequestAction,
    pub created_at: u64,
}

/// Position of a response among all responses seen for one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseOrdinal {
    /// The first response, or a redelivery of it.
    First,
    /// A response at a later bus offset than the first one.
    Subsequent,
}

/// Session metadata in a SQLite database shared by all service instances.
pub struct SessionStore {
    conn: Mutex<Connection>,
}

impl SessionStore {
    /// Opens or creates the database. With `durable` every commit is fsynced.
    pub fn open(path: impl AsRef<Path>, durable: bool) -> Result<Self, StoreError> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(Duration::from_secs(30))?;
        conn.query_row("PRAGMA journal_mode=WAL", [], |_| Ok(()))?;
        conn.pragma_update(None, "synchronous", if durable { "FULL" } else { "NORMAL" })?;
        conn.execute_batch(SCHEMA)?;
        Ok(SessionStore { conn: Mutex::new(conn) })
    }

    pub fn open_in_memory() -> Result<Self, StoreError> {
        let conn = Connection::open_in_memory()?;
        conn.execute_batch(SCHEMA)?;
        Ok(SessionStore { conn: Mutex::new(conn) })
    }

    fn write<T>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    pub fn upsert_tracer(&self, tracer_id: &str, mode: &str, connected_at: u64) -> Result<(), StoreError> {
        self.conn.lock().execute(
            "INSERT INTO tracers (tracer_id, mode, connected_at, connected) VALUES (?1, ?2, ?3, 1)
             ON CONFLICT(tracer_id) DO UPDATE SET mode = excluded.mode, connected = 1,
                 connected_at = MAX(connected_at, excluded.connected_at)",
            params![tracer_id, mode, connected_at as i64],
        )?;
        Ok(())
    }

    /// Marks a tracer disconnected unless it reconnected after `at`.
    pub fn mark_tracer_disconnected(&self, tracer_id: &str, at: u64) -> Result<(), StoreError> {
        self.conn.lock().execute(
            "UPDATE tracers SET connected = 0 WHERE tracer_id = ?1 AND connected_at <= ?2",
            params![tracer_id, at as i64],
        )?;
        Ok(())
    }

    pub fn tracer(&self, tracer_id: &str) -> Result<Option<TracerInfo>, StoreError> {
        let conn = self.conn.lock();
        let t = conn
            .query_row(
                "SELECT tracer_id, mode, connected_at, connected FROM tracers WHERE tracer_id = ?1",
                params![tracer_id],
                tracer_from_row,
            )
            .optional()?;
        Ok(t)
    }

    pub fn tracers(&self) -> Result<Vec<TracerInfo>, StoreError> {
        let conn = self.conn.lock();
        let mut stmt =
            conn.prepare_cached("SELECT tracer_id, mode, connected_at, connected FROM tracers ORDER BY tracer_id")?;
        let rows = stmt.query_map([], tracer_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Creates a CREATED session for a known tracer with no other live session.
    pub fn create_session(&self, tracer_id: &str, now: u64) -> Result<SessionRecord, StoreError> {
        self.write(|tx| {
            let known: Option<i64> = tx
                .query_row("SELECT 1 FROM tracers WHERE tracer_id = ?1", params![tracer_id], |r| r.get(0))
                .optional()?;
            if known.is_none() {
                return Err(StoreError::UnknownTracer(tracer_id.to_owned()));
            }
            let busy: Option<i64> = tx
                .query_row(
                    "SELECT session_id FROM sessions WHERE tracer_id = ?1
                     AND state NOT IN ('COMPLETED', 'INTERRUPTED', 'FAILED') LIMIT 1",
                    params![tracer_id],
                    |r| r.get(0),
                )
                .optional()?;
            if let Some(sid) = busy {
                return Err(StoreError::TracerBusy { tracer_id: tracer_id.to_owned(), session_id: sid as u64 });
            }
            tx.execute(
                "INSERT INTO sessions (tracer_id, state, state_version, created_at) VALUES (?1, 'CREATED', 0, ?2)",
                params![tracer_id, now as i64],
            )?;
            let sid = tx.last_insert_rowid() as u64;
            get_in(tx, sid)
        })
    }

    pub fn get(&self, session_id: u64) -> Result<SessionRecord, StoreError> {
        let conn = self.conn.lock();
        get_in(&conn, session_id)
    }

    pub fn list(&self) -> Result<Vec<SessionRecord>, StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare_cached(&format!("SELECT {SESSION_COLUMNS} FROM sessions ORDER BY session_id"))?;
        let rows = stmt.query_map([], SessionRecord::from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Non-terminal sessions of a tracer, oldest first.
    pub fn live_sessions_for(&self, tracer_id: &str) -> Result<Vec<SessionRecord>, StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare_cached(&format!(
            "SELECT {SESSION_COLUMNS} FROM sessions WHERE tracer_id = ?1
             AND state NOT IN ('COMPLETED', 'INTERRUPTED', 'FAILED') ORDER BY session_id"
        ))?;
        let rows = stmt.query_map(params![tracer_id], SessionRecord::from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Sessions currently in `state`, oldest first.
    pub fn sessions_in_state(&self, state: SessionState) -> Result<Vec<SessionRecord>, StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn
            .prepare_cached(&format!("SELECT {SESSION_COLUMNS} FROM sessions WHERE state = ?1 ORDER BY session_id"))?;
        let rows = stmt.query_map(params![state.as_str()], SessionRecord::from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Applies `new_state` iff the stored version equals `expected_version`
    /// and the edge is legal. Bumps the version by one on success.
    pub fn cas_transition(
        &self,
        session_id: u64,
        expected_version: u64,
        new_state: SessionState,
        updates: FieldUpdates,
    ) -> Result<SessionRecord, StoreError> {
        self.write(|tx| {
            let cur = get_in(tx, session_id)?;
            if cur.state_version != expected_version {
                return Err(StoreError::VersionConflict { expected: expected_version, actual: cur.state_version });
            }
            if !cur.state.can_transition_to(new_state) {
                return Err(StoreError::IllegalTransition { from: cur.state, to: new_state });
            }
            tx.execute(
                "UPDATE sessions SET state = ?1, state_version = state_version + 1,
                     started_at = COALESCE(?2, started_at),
                     completed_at = COALESCE(?3, completed_at),
                     error_detail = COALESCE(?4, error_detail)
                 WHERE session_id = ?5 AND state_version = ?6",
                params![
                    new_state.as_str(),
                    updates.started_at.map(|v| v as i64),
                    updates.completed_at.map(|v| v as i64),
                    updates.error_detail,
                    session_id as i64,
                    expected_version as i64,
                ],
            )?;
            get_in(tx, session_id)
        })
    }

    /// Records stored-event progress. Counts only grow; the processing
    /// window only widens.
    pub fn record_progress(
        &self,
        session_id: u64,
        event_count: u64,
        first_at: u64,
        last_at: u64,
    ) -> Result<SessionRecord, StoreError> {
        self.write(|tx| {
            let n = tx.execute(
                "UPDATE sessions SET
                     event_count = MAX(event_count, ?1),
                     first_event_at = CASE WHEN first_event_at IS NULL OR first_event_at > ?2
                                           THEN ?2 ELSE first_event_at END,
                     last_event_at = CASE WHEN last_event_at IS NULL OR last_event_at < ?3
                                          THEN ?3 ELSE last_event_at END
                 WHERE session_id = ?4",
                params![event_count as i64, first_at as i64, last_at as i64, session_id as i64],
            )?;
            if n == 0 {
                return Err(StoreError::UnknownSession(session_id));
            }
            get_in(tx, session_id)
        })
    }

    /// Allocates the next request id and records the command in one transaction.
    pub fn new_request(
        &self,
        session_id: u64,
        tracer_id: &str,
        action: RequestAction,
        now: u64,
    ) -> Result<RequestRecord, StoreError> {
        self.write(|tx| {
            let request_id = bump_counter(tx, "request_id")?;
            tx.execute(
                "INSERT INTO requests (request_id, session_id, tracer_id, action, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
                params![request_id as i64, session_id as i64, tracer_id, action.as_str(), now as i64],
            )?;
            Ok(RequestRecord { request_id, session_id, tracer_id: tracer_id.to_owned(), action, created_at: now })
        })
    }

    pub fn request(&self, request_id: u64) -> Result<Option<RequestRecord>, StoreError> {
        let conn = self.conn.lock();
        let r = conn
            .query_row(
                "SELECT request_id, session_id, tracer_id, action, created_at FROM requests WHERE request_id = ?1",
                params![request_id as i64],
                request_from_row,
            )
            .optional()?;
        Ok(r)
    }

    pub fn requests_for(&self, session_id: u64) -> Result<Vec<RequestRecord>, StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare_cached(
            "SELECT request_id, session_id, tracer_id, action, created_at FROM requests
             WHERE session_id = ?1 ORDER BY request_id",
        )?;
        let rows = stmt.query_map(params![session_id as i64], request_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Classifies a response seen at bus `offset`. Idempotent under redelivery.
    pub fn observe_response(
        &self,
        request_id: u64,
        offset: u64,
    ) -> Result<Option<(RequestRecord, ResponseOrdinal)>, StoreError> {
        self.write(|tx| {
            let row = tx
                .query_row(
                    "SELECT request_id, session_id, tracer_id, action, created_at, first_response_offset
                     FROM requests WHERE request_id = ?1",
                    params![request_id as i64],
                    |r| Ok((request_from_row(r)?, r.get::<_, Option<i64>>(5)?)),
                )
                .optional()?;
            let Some((req, first)) = row else { return Ok(None) };
            let ordinal = match first {
                None => {
                    tx.execute(
                        "UPDATE requests SET first_response_offset = ?1 WHERE request_id = ?2",
                        params![offset as i64, request_id as i64],
                    )?;
                    ResponseOrdinal::First
                }
                Some(first) if offset as i64 <= first => ResponseOrdinal::First,
                Some(_) => ResponseOrdinal::Subsequent,
            };
            Ok(Some((req, ordinal)))
        })
    }

    /// Adds `delta` to a named counter and returns the new value.
    pub fn add_counter(&self, name: &str, delta: u64) -> Result<u64, StoreError> {
        self.write(|tx| {
            tx.execute(
                "INSERT INTO counters (name, value) VALUES (?1, ?2)
                 ON CONFLICT(name) DO UPDATE SET value = value + excluded.value",
                params![name, delta as i64],
            )?;
            Ok(tx.query_row("SELECT value FROM counters WHERE name = ?1", params![name], |r| r.get::<_, i64>(0))?
                as u64)
        })
    }

    pub fn counter(&self, name: &str) -> Result<u64, StoreError> {
        let conn = self.conn.lock();
        let v: Option<i64> =
            conn.query_row("SELECT value FROM counters WHERE name = ?1", params![name], |r| r.get(0)).optional()?;
        Ok(v.unwrap_or(0) as u64)
    }
}

fn get_in(conn: &Connection, session_id: u64) -> Result<SessionRecord, StoreError> {
    conn.query_row(
        &format!("SELECT {SESSION_COLUMNS} FROM sessions WHERE session_id = ?1"),
        params![session_id as i64],
        SessionRecord::from_row,
    )
    .optional()?
    .ok_or(StoreError::UnknownSession(session_id))
}

fn bump_counter(tx: &Transaction<'_>, name: &str) -> Result<u64, StoreError> {
    tx.execute(
        "INSERT INTO counters (name, value) VALUES (?1, 1)
         ON CONFLICT(name) DO UPDATE SET value = value + 1",
        params![name],
    )?;
    Ok(tx.query_row("SELECT value FROM counters WHERE name = ?1", params![name], |r| r.get::<_, i64>(0))? as u64)
}

fn tracer_from_row(row: &Row<'_>) -> rusqlite::Result<TracerInfo> {
    Ok(TracerInfo {
        tracer_id: row.get(0)?,
        mode: row.get(1)?,
        connected_at: row.get::<_, i64>(2)? as u64,
        connected: row.get::<_, i64>(3)? != 0,
    })
}

fn request_from_row(row: &Row<'_>) -> rusqlite::Result<RequestRecord> {
    let action: String = row.get(3)?;
    let action = match action.as_str() {
        "start" => RequestAction::Start,
        "stop" => RequestAction::Stop,
        other => {
            return Err(rusqlite::Error::FromSqlConversionFailure(
                3,
                rusqlite::types::Type::Text,
                format!("unknown action {other:?}").into(),
            ))
        }
    };
    Ok(RequestRecord {
        request_id: row.get::<_, i64>(0)? as u64,
        session_id: row.get::<_, i64>(1)? as u64,
        tracer_id: row.get(2)?,
        action,
        created_at: row.get::<_, i64>(4)? as u64,
    })
}
