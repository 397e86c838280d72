//! Persistence for the session service.
//!
//! Two embedded stores share a data directory:
//!
//! ```text
//! <DATA_DIR>/sessions.db                      session metadata (SQLite, WAL)
//! <DATA_DIR>/traces/<session_id>/seg-<n>.blk  event blocks, ~64 KiB per segment
//! <DATA_DIR>/traces/<session_id>/LOCK         cross-process append lock
//! ```
//!
//! Both are safe to open from several processes at once. Session state
//! changes go through [`SessionStore::cas_transition`], which is the only
//! coordination point between stateless service instances.

mod error;
mod rangeset;
mod session;
mod state;
mod trace;

pub use error::StoreError;
pub use rangeset::RangeSet;
pub use session::{
    now_micros, FieldUpdates, RequestAction, RequestRecord, ResponseOrdinal, SessionRecord, SessionStats, SessionStore,
    TracerInfo,
};
pub use state::SessionState;
pub use trace::{AppendOutcome, BlockMeta, TraceStore, SEGMENT_TARGET_BYTES};

/// Environment variable naming the data directory.
pub const DATA_DIR_ENV: &str = "DATA_DIR";
