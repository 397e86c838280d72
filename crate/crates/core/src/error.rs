use thiserror::Error;

/// Failure while turning bytes back into trace structures.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input truncated")]
    Truncated,
    #[error("non-minimal varint encoding")]
    NonMinimalVarint,
    #[error("varint exceeds 64 bits")]
    VarintOverflow,
    #[error("unknown event kind 0x{0:02x}")]
    UnknownEventKind(u8),
    #[error("invalid argument flag 0x{0:02x}")]
    InvalidArgFlag(u8),
    #[error("unknown message type 0x{0:02x}")]
    UnknownMsgType(u8),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("event batch is empty")]
    EmptyBatch,
    #[error("tracer id is empty")]
    EmptyTracerId,
    #[error("invalid utf-8 in string field")]
    InvalidUtf8,
    #[error("invalid {field} value 0x{value:02x}")]
    InvalidEnum { field: &'static str, value: u8 },
    #[error("{0} overflows u64")]
    Overflow(&'static str),
    #[error("value {value} does not fit in {field}")]
    OutOfRange { field: &'static str, value: u64 },
}

/// Input rejected by an encoder because it violates an event invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("event batch is empty")]
    EmptyBatch,
    #[error("timestamps decrease at index {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("sequence number at index {index} is {found}, expected {expected}")]
    NonContiguousSeq { index: usize, expected: u64, found: u64 },
    #[error("tracer id is empty")]
    EmptyTracerId,
}

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported recording version {0}")]
    VersionUnsupported(u8),
    #[error("header announces {header} events, found {actual}")]
    CountMismatch { header: u64, actual: u64 },
    #[error("event at {timestamp} ticks lies beyond duration {duration}")]
    DurationExceeded { timestamp: u64, duration: u64 },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
