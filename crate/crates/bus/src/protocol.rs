//! Length-prefixed TCP record protocol.
//!
//! Every message in either direction is `u32 LE length ‖ body`. A request
//! body is `opcode ‖ payload`; a response body is `0x00 ‖ payload` on
//! success or `0xFF ‖ error`. Integers are LEB128 varints, strings and byte
//! strings are varint-length-prefixed.
//!
//! | opcode | request payload                                   | response payload |
//! |--------|---------------------------------------------------|------------------|
//! | 0x01 CREATE    | topic, partitions                         | partitions |
//! | 0x02 PUBLISH   | topic, n, n × (key, value)                | n, n × (partition, offset) |
//! | 0x03 SUBSCRIBE | topic, group, consumer                    | subscription id |
//! | 0x04 POLL      | subscription, max_records, timeout_ms     | n, n × (partition, offset, key, value) |
//! | 0x05 COMMIT    | subscription, partition, offset           | (empty) |
//! | 0x06 HEARTBEAT | subscription                              | n, n × partition |
//!
//! Error body: `code u8 ‖ message ‖ varint partition ‖ varint offset`, codes
//! as in [`BusError::code`]. Subscriptions belong to the connection that
//! created them and are dropped, leaving their group, when it closes.

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tracecloud_core::varint::{put_len_prefixed, put_varint, Reader};
use tracecloud_core::DecodeError;

use crate::error::BusError;

pub const OP_CREATE: u8 = 0x01;
pub const OP_PUBLISH: u8 = 0x02;
pub const OP_SUBSCRIBE: u8 = 0x03;
pub const OP_POLL: u8 = 0x04;
pub const OP_COMMIT: u8 = 0x05;
pub const OP_HEARTBEAT: u8 = 0x06;

pub const RESP_OK: u8 = 0x00;
pub const RESP_ERR: u8 = 0xFF;

/// Upper bound on a single message body.
pub const MAX_MESSAGE_LEN: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Create { topic: String, partitions: u32 },
    Publish { topic: String, records: Vec<(Vec<u8>, Vec<u8>)> },
    Subscribe { topic: String, group: String, consumer: String },
    Poll { subscription: u64, max_records: u32, timeout_ms: u32 },
    Commit { subscription: u64, partition: u32, offset: u64 },
    Heartbeat { subscription: u64 },
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Request::Create { topic, partitions } => {
                out.push(OP_CREATE);
                put_len_prefixed(&mut out, topic.as_bytes());
                put_varint(&mut out, u64::from(*partitions));
            }
            Request::Publish { topic, records } => {
                out.push(OP_PUBLISH);
                put_len_prefixed(&mut out, topic.as_bytes());
                put_varint(&mut out, records.len() as u64);
                for (k, v) in records {
                    put_len_prefixed(&mut out, k);
                    put_len_prefixed(&mut out, v);
                }
            }
            Request::Subscribe { topic, group, consumer } => {
                out.push(OP_SUBSCRIBE);
                put_len_prefixed(&mut out, topic.as_bytes());
                put_len_prefixed(&mut out, group.as_bytes());
                put_len_prefixed(&mut out, consumer.as_bytes());
            }
            Request::Poll { subscription, max_records, timeout_ms } => {
                out.push(OP_POLL);
                put_varint(&mut out, *subscription);
                put_varint(&mut out, u64::from(*max_records));
                put_varint(&mut out, u64::from(*timeout_ms));
            }
            Request::Commit { subscription, partition, offset } => {
                out.push(OP_COMMIT);
                put_varint(&mut out, *subscription);
                put_varint(&mut out, u64::from(*partition));
                put_varint(&mut out, *offset);
            }
            Request::Heartbeat { subscription } => {
                out.push(OP_HEARTBEAT);
                put_varint(&mut out, *subscription);
            }
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(body);
        let req = match r.u8()? {
            OP_CREATE => Request::Create { topic: r.string()?.to_owned(), partitions: r.varint_u32("partitions")? },
            OP_PUBLISH => {
                let topic = r.string()?.to_owned();
                let n = r.varint()?;
                let mut records = Vec::with_capacity((n as usize).min(r.remaining() / 2));
                for _ in 0..n {
                    let k = r.len_prefixed()?.to_vec();
                    let v = r.len_prefixed()?.to_vec();
                    records.push((k, v));
                }
                Request::Publish { topic, records }
            }
            OP_SUBSCRIBE => Request::Subscribe {
                topic: r.string()?.to_owned(),
                group: r.string()?.to_owned(),
                consumer: r.string()?.to_owned(),
            },
            OP_POLL => Request::Poll {
                subscription: r.varint()?,
                max_records: r.varint_u32("max_records")?,
                timeout_ms: r.varint_u32("timeout_ms")?,
            },
            OP_COMMIT => Request::Commit {
                subscription: r.varint()?,
                partition: r.varint_u32("partition")?,
                offset: r.varint()?,
            },
            OP_HEARTBEAT => Request::Heartbeat { subscription: r.varint()? },
            other => return Err(DecodeError::UnknownMsgType(other)),
        };
        r.finish()?;
        Ok(req)
    }
}

pub fn encode_error(err: &BusError) -> Vec<u8> {
    let mut out = vec![RESP_ERR, err.code()];
    let (name, partition, offset) = match err {
        BusError::TopicExists(t) | BusError::UnknownTopic(t) | BusError::InvalidTopic(t) => (t.clone(), 0, 0),
        BusError::RevokedPartition { partition } => (String::new(), *partition, 0),
        BusError::OffsetOutOfRange { partition, offset } => (String::new(), *partition, *offset),
        BusError::UnknownSubscription(id) => (String::new(), 0, *id),
        other => (other.to_string(), 0, 0),
    };
    put_len_prefixed(&mut out, name.as_bytes());
    put_varint(&mut out, u64::from(partition));
    put_varint(&mut out, offset);
    out
}

/// Reconstructs the broker-side error from an error body (after 0xFF).
pub fn decode_error(r: &mut Reader<'_>) -> Result<BusError, DecodeError> {
    let code = r.u8()?;
    let name = r.string()?.to_owned();
    let partition = r.varint_u32("partition")?;
    let offset = r.varint()?;
    Ok(match code {
        1 => BusError::TopicExists(name),
        2 => BusError::UnknownTopic(name),
        3 => BusError::InvalidTopic(name),
        4 => BusError::RevokedPartition { partition },
        5 => BusError::OffsetOutOfRange { partition, offset },
        6 => BusError::UnknownMember,
        7 => BusError::UnknownSubscription(offset),
        _ => BusError::Protocol(format!("remote error: {name}")),
    })
}

pub async fn read_message<R: AsyncReadExt + Unpin>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE_LEN {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("message of {len} bytes too large")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    Ok(Some(body))
}

pub async fn write_message<W: AsyncWriteExt + Unpin>(w: &mut W, body: &[u8]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf).await?;
    w.flush().await
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn request() -> impl Strategy<Value = Request> {
        let bytes = || prop::collection::vec(any::<u8>(), 0..16);
        prop_oneof![
            ("[a-z.]{1,12}", any::<u32>()).prop_map(|(topic, partitions)| Request::Create { topic, partitions }),
            ("[a-z.]{1,12}", prop::collection::vec((bytes(), bytes()), 0..8))
                .prop_map(|(topic, records)| Request::Publish { topic, records }),
            ("[a-z]{1,8}", "[a-z]{1,8}", "[a-z0-9-]{1,8}").prop_map(|(topic, group, consumer)| Request::Subscribe {
                topic,
                group,
                consumer
            }),
            (any::<u64>(), any::<u32>(), any::<u32>()).prop_map(|(subscription, max_records, timeout_ms)| {
                Request::Poll { subscription, max_records, timeout_ms }
            }),
            (any::<u64>(), any::<u32>(), any::<u64>()).prop_map(|(subscription, partition, offset)| Request::Commit {
                subscription,
                partition,
                offset
            }),
            any::<u64>().prop_map(|subscription| Request::Heartbeat { subscription }),
        ]
    }

    proptest! {
        #[test]
        fn request_roundtrip(req in request()) {
            prop_assert_eq!(Request::decode(&req.encode()).unwrap(), req);
        }
    }

    #[test]
    fn error_roundtrip() {
        for err in [
            BusError::TopicExists("trace.events".into()),
            BusError::UnknownTopic("x".into()),
            BusError::RevokedPartition { partition: 7 },
            BusError::OffsetOutOfRange { partition: 2, offset: 99 },
            BusError::UnknownMember,
        ] {
            let body = encode_error(&err);
            let mut r = Reader::new(&body[1..]);
            let back = decode_error(&mut r).unwrap();
            assert_eq!(back.to_string(), err.to_string());
        }
    }
}
