//! Delta-timestamp event batch encoding.
//!
//! Layout:
//!
//! ```text
//! varint(first_seq) ‖ varint(count) ‖ count × (
//!     varint(delta_ticks) ‖ kind u8 ‖ varint(actor_id) ‖ flag u8 ‖ [varint(arg)]
//! )
//! ```
//!
//! The first delta is relative to the caller-supplied base timestamp, every
//! later one to the previous event. Sequence numbers are implicit:
//! `seq(i) = first_seq + i`.

use crate::error::{DecodeError, EncodeError};
use crate::event::{EventKind, TraceEvent};
use crate::varint::{put_varint, Reader};

const ARG_ABSENT: u8 = 0x00;
const ARG_PRESENT: u8 = 0x01;

/// Smallest possible encoded event: 1-byte delta, kind, 1-byte actor, flag.
const MIN_EVENT_LEN: usize = 4;

/// Checks the preconditions shared by every batch encoder.
pub fn validate_batch(events: &[TraceEvent], base_timestamp: u64) -> Result<(), EncodeError> {
    let first = events.first().ok_or(EncodeError::EmptyBatch)?;
    let mut prev_ts = base_timestamp;
    for (index, ev) in events.iter().enumerate() {
        if ev.timestamp_ticks < prev_ts {
            return Err(EncodeError::NonMonotonicTimestamps { index });
        }
        let expected = first.seq.wrapping_add(index as u64);
        if ev.seq != expected || (index > 0 && expected < first.seq) {
            return Err(EncodeError::NonContiguousSeq { index, expected, found: ev.seq });
        }
        prev_ts = ev.timestamp_ticks;
    }
    Ok(())
}

/// Encodes `events` into a fresh buffer.
///
/// `events[i].seq` must equal `events[0].seq + i`; the first event's sequence
/// number is written as the batch's `first_seq`.
pub fn encode_event_batch(events: &[TraceEvent], base_timestamp: u64) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(events.len() * 6 + 4);
    encode_event_batch_into(&mut out, events, base_timestamp)?;
    Ok(out)
}

/// Like [`encode_event_batch`], appending to `out`.
pub fn encode_event_batch_into(
    out: &mut Vec<u8>,
    events: &[TraceEvent],
    base_timestamp: u64,
) -> Result<(), EncodeError> {
    validate_batch(events, base_timestamp)?;
    put_varint(out, events[0].seq);
    put_varint(out, events.len() as u64);
    let mut prev_ts = base_timestamp;
    for ev in events {
        put_varint(out, ev.timestamp_ticks - prev_ts);
        out.push(ev.kind.code());
        put_varint(out, u64::from(ev.actor_id));
        match ev.arg {
            None => out.push(ARG_ABSENT),
            Some(arg) => {
                out.push(ARG_PRESENT);
                put_varint(out, u64::from(arg));
            }
        }
        prev_ts = ev.timestamp_ticks;
    }
    Ok(())
}

/// Inverse of [`encode_event_batch`]. The whole input must be one batch.
pub fn decode_event_batch(bytes: &[u8], base_timestamp: u64) -> Result<Vec<TraceEvent>, DecodeError> {
    let mut reader = Reader::new(bytes);
    let events = read_event_batch(&mut reader, base_timestamp)?;
    reader.finish()?;
    Ok(events)
}

/// Decodes one batch from `reader`, leaving any following bytes unread.
pub fn read_event_batch(reader: &mut Reader<'_>, base_timestamp: u64) -> Result<Vec<TraceEvent>, DecodeError> {
    let first_seq = reader.varint()?;
    let count = reader.varint()?;
    if count == 0 {
        return Err(DecodeError::EmptyBatch);
    }
    if first_seq.checked_add(count - 1).is_none() {
        return Err(DecodeError::Overflow("sequence number"));
    }
    // A lying count must not drive the allocation.
    let cap = (count as usize).min(reader.remaining() / MIN_EVENT_LEN + 1);
    let mut events = Vec::with_capacity(cap);
    let mut ts = base_timestamp;
    for i in 0..count {
        let delta = reader.varint()?;
        ts = ts.checked_add(delta).ok_or(DecodeError::Overflow("timestamp"))?;
        let kind = EventKind::try_from(reader.u8()?)?;
        let actor_id = reader.varint_u32("actor_id")?;
        let arg = match reader.u8()? {
            ARG_ABSENT => None,
            ARG_PRESENT => Some(reader.varint_u32("arg")?),
            other => return Err(DecodeError::InvalidArgFlag(other)),
        };
        events.push(TraceEvent { timestamp_ticks: ts, seq: first_seq + i, kind, actor_id, arg });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_event_layout() {
        let ev = TraceEvent::new(0, 0, EventKind::TaskStartExec, 1);
        let enc = encode_event_batch(&[ev], 0).unwrap();
        assert_eq!(enc, vec![0x00, 0x01, 0x00, 0x02, 0x01, 0x00]);
    }

    #[test]
    fn decodes_minimal_batch_relative_to_base() {
        let events = decode_event_batch(&[0x00, 0x01, 0x00, 0x02, 0x01, 0x00], 1234).unwrap();
        assert_eq!(events, vec![TraceEvent::new(1234, 0, EventKind::TaskStartExec, 1)]);
    }

    #[test]
    fn empty_batch_is_rejected_both_ways() {
        assert_eq!(encode_event_batch(&[], 0), Err(EncodeError::EmptyBatch));
        assert_eq!(decode_event_batch(&[0x00, 0x00], 0), Err(DecodeError::EmptyBatch));
    }

    #[test]
    fn non_monotonic_timestamps_rejected() {
        let a = TraceEvent::new(10, 0, EventKind::IsrEnter, 3);
        let b = TraceEvent::new(9, 1, EventKind::IsrExit, 3);
        assert_eq!(encode_event_batch(&[a, b], 0), Err(EncodeError::NonMonotonicTimestamps { index: 1 }));
        assert_eq!(encode_event_batch(&[a], 11), Err(EncodeError::NonMonotonicTimestamps { index: 0 }));
    }

    #[test]
    fn gap_in_seq_rejected() {
        let a = TraceEvent::new(1, 5, EventKind::IsrEnter, 3);
        let b = TraceEvent::new(2, 7, EventKind::IsrExit, 3);
        assert!(matches!(
            encode_event_batch(&[a, b], 0),
            Err(EncodeError::NonContiguousSeq { index: 1, expected: 6, found: 7 })
        ));
    }

    #[test]
    fn truncation_returns_no_events() {
        let events: Vec<_> =
            (0..10).map(|i| TraceEvent::new(i * 100, i, EventKind::UserMarker, 2).with_arg(i as u32 * 7)).collect();
        let enc = encode_event_batch(&events, 0).unwrap();
        for cut in 0..enc.len() {
            assert_eq!(decode_event_batch(&enc[..cut], 0), Err(DecodeError::Truncated), "cut {cut}");
        }
        assert_eq!(decode_event_batch(&enc, 0).unwrap(), events);
    }

    #[test]
    fn unknown_kind_and_bad_flag() {
        assert_eq!(
            decode_event_batch(&[0x00, 0x01, 0x00, 0x09, 0x01, 0x00], 0),
            Err(DecodeError::UnknownEventKind(0x09))
        );
        assert_eq!(
            decode_event_batch(&[0x00, 0x01, 0x00, 0x02, 0x01, 0x02], 0),
            Err(DecodeError::InvalidArgFlag(0x02))
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        assert_eq!(
            decode_event_batch(&[0x00, 0x01, 0x00, 0x02, 0x01, 0x00, 0xAA], 0),
            Err(DecodeError::TrailingBytes(1))
        );
    }

    #[test]
    fn huge_count_does_not_allocate() {
        // count = 2^62 with no event bytes behind it.
        let mut bytes = vec![0x00];
        put_varint(&mut bytes, 1 << 62);
        assert_eq!(decode_event_batch(&bytes, 0), Err(DecodeError::Truncated));
    }

    #[test]
    fn timestamp_overflow_detected() {
        let mut bytes = vec![0x00, 0x01];
        put_varint(&mut bytes, 10);
        bytes.extend_from_slice(&[0x02, 0x01, 0x00]);
        assert_eq!(decode_event_batch(&bytes, u64::MAX - 5), Err(DecodeError::Overflow("timestamp")));
    }
}
