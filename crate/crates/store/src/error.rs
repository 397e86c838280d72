use thiserror::Error;

use crate::state::SessionState;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session {0}")]
    UnknownSession(u64),
    #[error("unknown tracer {0}")]
    UnknownTracer(String),
    #[error("tracer {tracer_id} already has active session {session_id}")]
    TracerBusy { tracer_id: String, session_id: u64 },
    #[error("version conflict: expected {expected}, stored {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: SessionState, to: SessionState },
    #[error("session {0} has no stored events")]
    NoEvents(u64),
    #[error("invalid event input: {0}")]
    InvalidEvents(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
