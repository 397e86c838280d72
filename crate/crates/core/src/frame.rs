//! Connection frames exchanged between a tracer and the device gateway.
//!
//! A frame is one message-type byte followed by a type-specific payload.
//! Types 0x01..=0x04 travel tracer -> gateway, 0x10 and 0x11 gateway ->
//! tracer. A frame must be consumed exactly; trailing bytes are an error.

use crate::batch::{encode_event_batch_into, read_event_batch};
use crate::error::{DecodeError, EncodeError};
use crate::event::TraceEvent;
use crate::varint::{put_len_prefixed, put_varint, Reader};

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_EVENT_BATCH: u8 = 0x02;
pub const MSG_INTERRUPT: u8 = 0x03;
pub const MSG_RESPONSE: u8 = 0x04;
pub const MSG_START_TRACE: u8 = 0x10;
pub const MSG_STOP_TRACE: u8 = 0x11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TracerMode {
    /// Replay a recording as fast as the gateway accepts it.
    File,
    /// Replay paced to a configured event rate.
    Paced,
}

impl TracerMode {
    pub fn code(self) -> u8 {
        match self {
            TracerMode::File => 0,
            TracerMode::Paced => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, DecodeError> {
        match code {
            0 => Ok(TracerMode::File),
            1 => Ok(TracerMode::Paced),
            value => Err(DecodeError::InvalidEnum { field: "mode", value }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TracerMode::File => "file",
            TracerMode::Paced => "paced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResponseStatus {
    Ok,
    Rejected,
}

impl ResponseStatus {
    pub fn code(self) -> u8 {
        match self {
            ResponseStatus::Ok => 0,
            ResponseStatus::Rejected => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, DecodeError> {
        match code {
            0 => Ok(ResponseStatus::Ok),
            1 => Ok(ResponseStatus::Rejected),
            value => Err(DecodeError::InvalidEnum { field: "status", value }),
        }
    }
}

/// Reason carried by an INTERRUPT frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterruptCode {
    /// Tracer connection went away while a session was active.
    Disconnected,
    /// A frame from the tracer could not be decoded and was dropped.
    DecodeError,
    /// The target reported lost events.
    BufferOverflow,
    /// Target or debug probe failure reported by the tracer.
    TargetFault,
}

impl InterruptCode {
    pub fn code(self) -> u8 {
        match self {
            InterruptCode::Disconnected => 0x01,
            InterruptCode::DecodeError => 0x02,
            InterruptCode::BufferOverflow => 0x03,
            InterruptCode::TargetFault => 0x04,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, DecodeError> {
        match code {
            0x01 => Ok(InterruptCode::Disconnected),
            0x02 => Ok(InterruptCode::DecodeError),
            0x03 => Ok(InterruptCode::BufferOverflow),
            0x04 => Ok(InterruptCode::TargetFault),
            value => Err(DecodeError::InvalidEnum { field: "interrupt code", value }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InterruptCode::Disconnected => "DISCONNECTED",
            InterruptCode::DecodeError => "DECODE_ERROR",
            InterruptCode::BufferOverflow => "BUFFER_OVERFLOW",
            InterruptCode::TargetFault => "TARGET_FAULT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello { tracer_id: String, mode: TracerMode },
    EventBatch { session_id: u64, base_timestamp: u64, events: Vec<TraceEvent> },
    Interrupt { session_id: u64, code: InterruptCode, detail: String },
    Response { request_id: u64, status: ResponseStatus },
    StartTrace { request_id: u64, session_id: u64 },
    StopTrace { request_id: u64, session_id: u64 },
}

impl Frame {
    pub fn msg_type(&self) -> u8 {
        match self {
            Frame::Hello { .. } => MSG_HELLO,
            Frame::EventBatch { .. } => MSG_EVENT_BATCH,
            Frame::Interrupt { .. } => MSG_INTERRUPT,
            Frame::Response { .. } => MSG_RESPONSE,
            Frame::StartTrace { .. } => MSG_START_TRACE,
            Frame::StopTrace { .. } => MSG_STOP_TRACE,
        }
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    encode_frame_into(&mut out, frame)?;
    Ok(out)
}

pub fn encode_frame_into(out: &mut Vec<u8>, frame: &Frame) -> Result<(), EncodeError> {
    match frame {
        Frame::EventBatch { session_id, base_timestamp, events } => {
            encode_event_batch_frame_into(out, *session_id, *base_timestamp, events)?;
        }
        other => {
            out.push(other.msg_type());
            encode_payload_into(out, other)?;
        }
    }
    Ok(())
}

/// Encodes an EVENT_BATCH frame straight from a borrowed slice.
pub fn encode_event_batch_frame_into(
    out: &mut Vec<u8>,
    session_id: u64,
    base_timestamp: u64,
    events: &[TraceEvent],
) -> Result<(), EncodeError> {
    out.push(MSG_EVENT_BATCH);
    put_varint(out, session_id);
    put_varint(out, base_timestamp);
    encode_event_batch_into(out, events, base_timestamp)
}

/// Writes the payload of `frame` without the leading type byte.
pub(crate) fn encode_payload_into(out: &mut Vec<u8>, frame: &Frame) -> Result<(), EncodeError> {
    match frame {
        Frame::Hello { tracer_id, mode } => {
            if tracer_id.is_empty() {
                return Err(EncodeError::EmptyTracerId);
            }
            put_len_prefixed(out, tracer_id.as_bytes());
            out.push(mode.code());
        }
        Frame::EventBatch { session_id, base_timestamp, events } => {
            put_varint(out, *session_id);
            put_varint(out, *base_timestamp);
            encode_event_batch_into(out, events, *base_timestamp)?;
        }
        Frame::Interrupt { session_id, code, detail } => {
            put_varint(out, *session_id);
            out.push(code.code());
            put_len_prefixed(out, detail.as_bytes());
        }
        Frame::Response { request_id, status } => {
            put_varint(out, *request_id);
            out.push(status.code());
        }
        Frame::StartTrace { request_id, session_id } | Frame::StopTrace { request_id, session_id } => {
            put_varint(out, *request_id);
            put_varint(out, *session_id);
        }
    }
    Ok(())
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, DecodeError> {
    let mut reader = Reader::new(bytes);
    let msg_type = reader.u8()?;
    let frame = read_payload(&mut reader, msg_type)?;
    reader.finish()?;
    Ok(frame)
}

pub(crate) fn read_payload(reader: &mut Reader<'_>, msg_type: u8) -> Result<Frame, DecodeError> {
    let frame = match msg_type {
        MSG_HELLO => {
            let tracer_id = reader.string()?;
            if tracer_id.is_empty() {
                return Err(DecodeError::EmptyTracerId);
            }
            let mode = TracerMode::from_code(reader.u8()?)?;
            Frame::Hello { tracer_id: tracer_id.to_owned(), mode }
        }
        MSG_EVENT_BATCH => {
            let session_id = reader.varint()?;
            let base_timestamp = reader.varint()?;
            let events = read_event_batch(reader, base_timestamp)?;
            Frame::EventBatch { session_id, base_timestamp, events }
        }
        MSG_INTERRUPT => {
            let session_id = reader.varint()?;
            let code = InterruptCode::from_code(reader.u8()?)?;
            let detail = reader.string()?.to_owned();
            Frame::Interrupt { session_id, code, detail }
        }
        MSG_RESPONSE => {
            let request_id = reader.varint()?;
            let status = ResponseStatus::from_code(reader.u8()?)?;
            Frame::Response { request_id, status }
        }
        MSG_START_TRACE => {
            let request_id = reader.varint()?;
            let session_id = reader.varint()?;
            Frame::StartTrace { request_id, session_id }
        }
        MSG_STOP_TRACE => {
            let request_id = reader.varint()?;
            let session_id = reader.varint()?;
            Frame::StopTrace { request_id, session_id }
        }
        other => return Err(DecodeError::UnknownMsgType(other)),
    };
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::EventKind;

    #[test]
    fn stop_trace_layout() {
        let enc = encode_frame(&Frame::StopTrace { request_id: 1, session_id: 2 }).unwrap();
        assert_eq!(enc, vec![0x11, 0x01, 0x02]);
    }

    #[test]
    fn hello_layout() {
        let enc = encode_frame(&Frame::Hello { tracer_id: "T1".into(), mode: TracerMode::Paced }).unwrap();
        assert_eq!(enc, vec![0x01, 0x02, b'T', b'1', 0x01]);
        assert_eq!(decode_frame(&enc).unwrap(), Frame::Hello { tracer_id: "T1".into(), mode: TracerMode::Paced });
    }

    #[test]
    fn empty_tracer_id_rejected() {
        assert_eq!(decode_frame(&[0x01, 0x00, 0x00]), Err(DecodeError::EmptyTracerId));
        assert_eq!(
            encode_frame(&Frame::Hello { tracer_id: String::new(), mode: TracerMode::File }),
            Err(EncodeError::EmptyTracerId)
        );
    }

    #[test]
    fn unknown_type_and_trailing() {
        assert_eq!(decode_frame(&[0x05]), Err(DecodeError::UnknownMsgType(0x05)));
        assert_eq!(decode_frame(&[]), Err(DecodeError::Truncated));
        assert_eq!(decode_frame(&[0x11, 0x01, 0x02, 0x00]), Err(DecodeError::TrailingBytes(1)));
        assert_eq!(decode_frame(&[0x11, 0x01]), Err(DecodeError::Truncated));
    }

    #[test]
    fn response_and_interrupt_roundtrip() {
        for frame in [
            Frame::Response { request_id: 5, status: ResponseStatus::Ok },
            Frame::Response { request_id: 300, status: ResponseStatus::Rejected },
            Frame::Interrupt { session_id: 7, code: InterruptCode::DecodeError, detail: "bad kind".into() },
            Frame::StartTrace { request_id: 9, session_id: 1 << 40 },
        ] {
            assert_eq!(decode_frame(&encode_frame(&frame).unwrap()).unwrap(), frame);
        }
    }

    #[test]
    fn event_batch_frame_layout() {
        let frame = Frame::EventBatch {
            session_id: 7,
            base_timestamp: 100,
            events: vec![TraceEvent::new(100, 0, EventKind::TaskStartExec, 1)],
        };
        let enc = encode_frame(&frame).unwrap();
        assert_eq!(enc, vec![0x02, 0x07, 0x64, 0x00, 0x01, 0x00, 0x02, 0x01, 0x00]);
        assert_eq!(decode_frame(&enc).unwrap(), frame);
    }
}
