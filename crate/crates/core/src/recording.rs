//! `.trcr` recording files replayed by tracers in file mode.
//!
//! ```text
//! "TRCR" ‖ version u8 (=1) ‖ tick_rate_hz u32 LE ‖ event_count u64 LE
//!        ‖ duration_ticks u64 LE ‖ event batch body (base timestamp 0)
//! ```
//!
//! A recording without events is the 25-byte header alone.

use std::fs;
use std::path::Path;

use crate::batch::{decode_event_batch, encode_event_batch_into};
use crate::error::RecordingError;
use crate::event::TraceEvent;
use crate::varint::Reader;

pub const MAGIC: [u8; 4] = *b"TRCR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 8 + 8;
pub const FILE_EXTENSION: &str = "trcr";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordingHeader {
    pub tick_rate_hz: u32,
    pub event_count: u64,
    pub duration_ticks: u64,
}

impl RecordingHeader {
    pub fn duration_secs(&self) -> f64 {
        self.duration_ticks as f64 / f64::from(self.tick_rate_hz.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recording {
    pub header: RecordingHeader,
    pub events: Vec<TraceEvent>,
}

impl Recording {
    /// Builds a recording, deriving `event_count` from `events`.
    pub fn new(tick_rate_hz: u32, duration_ticks: u64, events: Vec<TraceEvent>) -> Self {
        let header = RecordingHeader { tick_rate_hz, event_count: events.len() as u64, duration_ticks };
        Self { header, events }
    }

    pub fn encode(&self) -> Result<Vec<u8>, RecordingError> {
        encode_recording(&self.header, &self.events)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RecordingError> {
        decode_recording(bytes)
    }
}

fn check_consistency(header: &RecordingHeader, events: &[TraceEvent]) -> Result<(), RecordingError> {
    let actual = events.len() as u64;
    if header.event_count != actual {
        return Err(RecordingError::CountMismatch { header: header.event_count, actual });
    }
    if let Some(last) = events.last() {
        if last.timestamp_ticks > header.duration_ticks {
            return Err(RecordingError::DurationExceeded {
                timestamp: last.timestamp_ticks,
                duration: header.duration_ticks,
            });
        }
    }
    Ok(())
}

pub fn encode_recording(header: &RecordingHeader, events: &[TraceEvent]) -> Result<Vec<u8>, RecordingError> {
    check_consistency(header, events)?;
    let mut out = Vec::with_capacity(HEADER_LEN + events.len() * 6);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header.tick_rate_hz.to_le_bytes());
    out.extend_from_slice(&header.event_count.to_le_bytes());
    out.extend_from_slice(&header.duration_ticks.to_le_bytes());
    if !events.is_empty() {
        encode_event_batch_into(&mut out, events, 0)?;
    }
    Ok(out)
}

pub fn decode_recording(bytes: &[u8]) -> Result<Recording, RecordingError> {
    let mut reader = Reader::new(bytes);
    let magic: [u8; 4] = reader.bytes(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(RecordingError::BadMagic(magic));
    }
    let version = reader.u8()?;
    if version != VERSION {
        return Err(RecordingError::VersionUnsupported(version));
    }
    let header = RecordingHeader {
        tick_rate_hz: reader.u32_le()?,
        event_count: reader.u64_le()?,
        duration_ticks: reader.u64_le()?,
    };
    let body = reader.rest();
    let events = if body.is_empty() { Vec::new() } else { decode_event_batch(body, 0)? };
    check_consistency(&header, &events)?;
    Ok(Recording { header, events })
}

pub fn write_recording(
    header: &RecordingHeader,
    events: &[TraceEvent],
    path: impl AsRef<Path>,
) -> Result<(), RecordingError> {
    let bytes = encode_recording(header, events)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a whole recording into memory.
pub fn read_recording(path: impl AsRef<Path>) -> Result<Recording, RecordingError> {
    let bytes = fs::read(path)?;
    decode_recording(&bytes)
}
