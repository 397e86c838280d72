use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Lifecycle of a tracing session.
///
/// ```text
/// CREATED -> STARTING -> ACTIVE -> STOPPING -> COMPLETED
///                |          |          \-----> INTERRUPTED
///                v          +--> COMPLETED
///              FAILED       +--> INTERRUPTED
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Created,
    Starting,
    Active,
    Stopping,
    Completed,
    Interrupted,
    Failed,
}

impl SessionState {
    pub const ALL: [SessionState; 7] = [
        SessionState::Created,
        SessionState::Starting,
        SessionState::Active,
        SessionState::Stopping,
        SessionState::Completed,
        SessionState::Interrupted,
        SessionState::Failed,
    ];

    /// States reachable in one step.
    pub fn successors(self) -> &'static [SessionState] {
        use SessionState::*;
        match self {
            Created => &[Starting],
            Starting => &[Active, Failed],
            Active => &[Stopping, Completed, Interrupted],
            Stopping => &[Completed, Interrupted],
            Completed | Interrupted | Failed => &[],
        }
    }

    pub fn can_transition_to(self, next: SessionState) -> bool {
        self.successors().contains(&next)
    }

    pub fn is_terminal(self) -> bool {
        self.successors().is_empty()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Created => "CREATED",
            SessionState::Starting => "STARTING",
            SessionState::Active => "ACTIVE",
            SessionState::Stopping => "STOPPING",
            SessionState::Completed => "COMPLETED",
            SessionState::Interrupted => "INTERRUPTED",
            SessionState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SessionState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SessionState::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown session state {s:?}"))
    }
}
