use crate::error::DecodeError;

/// RTOS-level event category. Wire codes are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum EventKind {
    TaskReady = 0x01,
    TaskStartExec = 0x02,
    TaskStopExec = 0x03,
    IsrEnter = 0x04,
    IsrExit = 0x05,
    UserMarker = 0x06,
    /// Target-side buffer loss; `arg` carries the number of dropped events.
    Overflow = 0x07,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::TaskReady,
        EventKind::TaskStartExec,
        EventKind::TaskStopExec,
        EventKind::IsrEnter,
        EventKind::IsrExit,
        EventKind::UserMarker,
        EventKind::Overflow,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::TaskReady => "TASK_READY",
            EventKind::TaskStartExec => "TASK_START_EXEC",
            EventKind::TaskStopExec => "TASK_STOP_EXEC",
            EventKind::IsrEnter => "ISR_ENTER",
            EventKind::IsrExit => "ISR_EXIT",
            EventKind::UserMarker => "USER_MARKER",
            EventKind::Overflow => "OVERFLOW",
        }
    }
}

impl TryFrom<u8> for EventKind {
    type Error = DecodeError;

    fn try_from(code: u8) -> Result<Self, DecodeError> {
        match code {
            0x01 => Ok(EventKind::TaskReady),
            0x02 => Ok(EventKind::TaskStartExec),
            0x03 => Ok(EventKind::TaskStopExec),
            0x04 => Ok(EventKind::IsrEnter),
            0x05 => Ok(EventKind::IsrExit),
            0x06 => Ok(EventKind::UserMarker),
            0x07 => Ok(EventKind::Overflow),
            other => Err(DecodeError::UnknownEventKind(other)),
        }
    }
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One timestamped occurrence on the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    /// Target clock ticks, non-decreasing within a session.
    pub timestamp_ticks: u64,
    /// Per-session sequence number, gap-free from 0.
    pub seq: u64,
    pub kind: EventKind,
    /// Task, ISR or marker identifier.
    pub actor_id: u32,
    pub arg: Option<u32>,
}

impl TraceEvent {
    pub fn new(timestamp_ticks: u64, seq: u64, kind: EventKind, actor_id: u32) -> Self {
        Self { timestamp_ticks, seq, kind, actor_id, arg: None }
    }

    pub fn with_arg(mut self, arg: u32) -> Self {
        self.arg = Some(arg);
        self
    }
}
