//! Envelope for records on the five publish-subscribe channels.
//!
//! A channel message is the originating frame prefixed with the tracer id
//! and the gateway receive time:
//!
//! ```text
//! varint(tracer_id_len) ‖ tracer_id ‖ varint(received_at_unix_ms) ‖ msg_type ‖ payload
//! ```
//!
//! Records on the events channel carry one event each, encoded as a
//! single-event EVENT_BATCH frame.

use crate::error::{DecodeError, EncodeError};
use crate::event::TraceEvent;
use crate::frame::{encode_event_batch_frame_into, encode_frame_into, read_payload, Frame};
use crate::varint::{put_len_prefixed, put_varint, Reader};

/// Channel names and their partition counts.
pub struct Topics;

impl Topics {
    pub const REQUESTS: &'static str = "trace.requests";
    pub const RESPONSES: &'static str = "trace.responses";
    pub const CONNECTIONS: &'static str = "trace.connections";
    pub const INTERRUPTS: &'static str = "trace.interrupts";
    pub const EVENTS: &'static str = "trace.events";

    pub const EVENTS_PARTITIONS: u32 = 16;

    /// All five channels with their partition counts.
    pub const ALL: [(&'static str, u32); 5] = [
        (Self::REQUESTS, 1),
        (Self::RESPONSES, 1),
        (Self::CONNECTIONS, 1),
        (Self::INTERRUPTS, 1),
        (Self::EVENTS, Self::EVENTS_PARTITIONS),
    ];
}

/// Partition key for records belonging to a session.
pub fn session_key(session_id: u64) -> [u8; 8] {
    session_id.to_le_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMessage {
    pub tracer_id: String,
    pub received_at_ms: u64,
    pub frame: Frame,
}

impl ChannelMessage {
    pub fn new(tracer_id: impl Into<String>, received_at_ms: u64, frame: Frame) -> Self {
        Self { tracer_id: tracer_id.into(), received_at_ms, frame }
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        let mut out = Vec::with_capacity(self.tracer_id.len() + 24);
        put_prefix(&mut out, &self.tracer_id, self.received_at_ms)?;
        encode_frame_into(&mut out, &self.frame)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut reader = Reader::new(bytes);
        let tracer_id = reader.string()?;
        if tracer_id.is_empty() {
            return Err(DecodeError::EmptyTracerId);
        }
        let received_at_ms = reader.varint()?;
        let msg_type = reader.u8()?;
        let frame = read_payload(&mut reader, msg_type)?;
        reader.finish()?;
        Ok(Self { tracer_id: tracer_id.to_owned(), received_at_ms, frame })
    }

    /// Returns the single event of an events-channel record.
    pub fn into_event(self) -> Option<(u64, TraceEvent)> {
        match self.frame {
            Frame::EventBatch { session_id, events, .. } if events.len() == 1 => Some((session_id, events[0])),
            _ => None,
        }
    }
}

fn put_prefix(out: &mut Vec<u8>, tracer_id: &str, received_at_ms: u64) -> Result<(), EncodeError> {
    if tracer_id.is_empty() {
        return Err(EncodeError::EmptyTracerId);
    }
    put_len_prefixed(out, tracer_id.as_bytes());
    put_varint(out, received_at_ms);
    Ok(())
}

/// Appends the events-channel record for one event to `out`.
pub fn encode_event_message_into(
    out: &mut Vec<u8>,
    tracer_id: &str,
    received_at_ms: u64,
    session_id: u64,
    event: &TraceEvent,
) -> Result<(), EncodeError> {
    put_prefix(out, tracer_id, received_at_ms)?;
    encode_event_batch_frame_into(out, session_id, event.timestamp_ticks, std::slice::from_ref(event))
}
