use proptest::prelude::*;
use tracecloud_core::channel::ChannelMessage;
use tracecloud_core::frame::{InterruptCode, ResponseStatus, TracerMode};
use tracecloud_core::{
    decode_event_batch, decode_frame, encode_event_batch, encode_frame, EventKind, Frame, Recording, TraceEvent,
};

fn kind() -> impl Strategy<Value = EventKind> {
    prop::sample::select(EventKind::ALL.to_vec())
}

/// (base_timestamp, events) with contiguous seqs and non-decreasing timestamps.
fn batch() -> impl Strategy<Value = (u64, Vec<TraceEvent>)> {
    (
        0u64..1 << 40,
        0u64..1 << 50,
        prop::collection::vec((0u64..100_000, kind(), any::<u32>(), prop::option::of(any::<u32>())), 1..80),
    )
        .prop_map(|(base, first_seq, raw)| {
            let mut ts = base;
            let events = raw
                .into_iter()
                .enumerate()
                .map(|(i, (delta, kind, actor_id, arg))| {
                    ts += delta;
                    TraceEvent { timestamp_ticks: ts, seq: first_seq + i as u64, kind, actor_id, arg }
                })
                .collect();
            (base, events)
        })
}

fn frame() -> impl Strategy<Value = Frame> {
    prop_oneof![
        ("[a-zA-Z0-9_-]{1,24}", any::<bool>()).prop_map(|(tracer_id, paced)| Frame::Hello {
            tracer_id,
            mode: if paced { TracerMode::Paced } else { TracerMode::File },
        }),
        (any::<u64>(), batch()).prop_map(|(session_id, (base_timestamp, events))| Frame::EventBatch {
            session_id,
            base_timestamp,
            events,
        }),
        (any::<u64>(), 0usize..4, ".{0,40}").prop_map(|(session_id, c, detail)| Frame::Interrupt {
            session_id,
            code: [
                InterruptCode::Disconnected,
                InterruptCode::DecodeError,
                InterruptCode::BufferOverflow,
                InterruptCode::TargetFault
            ][c],
            detail,
        }),
        (any::<u64>(), any::<bool>()).prop_map(|(request_id, ok)| Frame::Response {
            request_id,
            status: if ok { ResponseStatus::Ok } else { ResponseStatus::Rejected },
        }),
        (any::<u64>(), any::<u64>()).prop_map(|(request_id, session_id)| Frame::StartTrace { request_id, session_id }),
        (any::<u64>(), any::<u64>()).prop_map(|(request_id, session_id)| Frame::StopTrace { request_id, session_id }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn batch_roundtrip((base, events) in batch()) {
        let enc = encode_event_batch(&events, base).unwrap();
        prop_assert_eq!(decode_event_batch(&enc, base).unwrap(), events);
    }

    #[test]
    fn frame_roundtrip(frame in frame()) {
        let enc = encode_frame(&frame).unwrap();
        prop_assert_eq!(enc[0], frame.msg_type());
        prop_assert_eq!(decode_frame(&enc).unwrap(), frame);
    }

    #[test]
    fn channel_roundtrip(frame in frame(), tracer in "[a-z0-9]{1,12}", at in any::<u64>()) {
        let msg = ChannelMessage::new(tracer, at, frame);
        prop_assert_eq!(ChannelMessage::decode(&msg.encode().unwrap()).unwrap(), msg);
    }

    #[test]
    fn recording_roundtrip((_, mut events) in batch(), tick_rate in 1u32.., slack in 0u64..1000) {
        let first = events[0].seq;
        let t0 = events[0].timestamp_ticks;
        for ev in &mut events {
            ev.seq -= first;
            ev.timestamp_ticks -= t0;
        }
        let duration = events.last().unwrap().timestamp_ticks + slack;
        let rec = Recording::new(tick_rate, duration, events);
        prop_assert_eq!(Recording::decode(&rec.encode().unwrap()).unwrap(), rec);
    }

    #[test]
    fn decoders_are_total(bytes in prop::collection::vec(any::<u8>(), 0..256), base in any::<u64>()) {
        let _ = decode_event_batch(&bytes, base);
        let _ = decode_frame(&bytes);
        let _ = ChannelMessage::decode(&bytes);
        let _ = Recording::decode(&bytes);
    }

    #[test]
    fn encoding_is_minimal((base, events) in batch()) {
        // Every varint the encoder writes re-encodes to the same bytes, so the
        // strict decoder accepting the output is enough.
        let enc = encode_event_batch(&events, base).unwrap();
        prop_assert!(decode_event_batch(&enc, base).is_ok());
    }
}
