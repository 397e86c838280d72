//! Async client for the broker's TCP protocol.

use std::time::Duration;

use tokio::net::TcpStream;
use tracecloud_core::varint::Reader;

use crate::broker::{ConsumedRecord, RecordCoord, TopicInfo};
use crate::error::BusError;
use crate::protocol::{decode_error, read_message, write_message, Request, RESP_ERR, RESP_OK};

/// One connection to a remote broker. Requests are strictly sequential.
#[derive(Debug)]
pub struct BusClient {
    stream: TcpStream,
}

impl BusClient {
    pub async fn connect(addr: &str) -> Result<Self, BusError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    async fn call(&mut self, req: &Request) -> Result<Vec<u8>, BusError> {
        write_message(&mut self.stream, &req.encode()).await?;
        let body = read_message(&mut self.stream).await?.ok_or(BusError::Disconnected)?;
        match body.first() {
            Some(&RESP_OK) => Ok(body),
            Some(&RESP_ERR) => {
                let mut r = Reader::new(&body[1..]);
                Err(decode_error(&mut r).map_err(|e| BusError::Protocol(e.to_string()))?)
            }
            _ => Err(BusError::Protocol("unexpected response status".into())),
        }
    }

    pub async fn create_topic(&mut self, topic: &str, partitions: u32) -> Result<TopicInfo, BusError> {
        let body = self.call(&Request::Create { topic: topic.to_owned(), partitions }).await?;
        let mut r = Reader::new(&body[1..]);
        let partitions = r.varint_u32("partitions").map_err(proto)?;
        Ok(TopicInfo { name: topic.to_owned(), partitions })
    }

    /// Creates the topic, treating an existing one as success.
    pub async fn ensure_topic(&mut self, topic: &str, partitions: u32) -> Result<(), BusError> {
        match self.create_topic(topic, partitions).await {
            Ok(_) | Err(BusError::TopicExists(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub async fn publish(&mut self, topic: &str, key: &[u8], value: &[u8]) -> Result<RecordCoord, BusError> {
        let coords = self.publish_batch(topic, vec![(key.to_vec(), value.to_vec())]).await?;
        coords.into_iter().next().ok_or_else(|| BusError::Protocol("empty publish response".into()))
    }

    pub async fn publish_batch(
        &mut self,
        topic: &str,
        records: Vec<(Vec<u8>, Vec<u8>)>,
    ) -> Result<Vec<RecordCoord>, BusError> {
        let body = self.call(&Request::Publish { topic: topic.to_owned(), records }).await?;
        let mut r = Reader::new(&body[1..]);
        let n = r.varint().map_err(proto)?;
        (0..n)
            .map(|_| {
                Ok(RecordCoord {
                    partition: r.varint_u32("partition").map_err(proto)?,
                    offset: r.varint().map_err(proto)?,
                })
            })
            .collect()
    }

    /// Turns this connection into a consumer group membership.
    pub async fn subscribe(mut self, topic: &str, group: &str, consumer: &str) -> Result<RemoteSubscription, BusError> {
        let body = self
            .call(&Request::Subscribe {
                topic: topic.to_owned(),
                group: group.to_owned(),
                consumer: consumer.to_owned(),
            })
            .await?;
        let id = Reader::new(&body[1..]).varint().map_err(proto)?;
        Ok(RemoteSubscription { client: self, id, topic: topic.to_owned() })
    }
}

fn proto(e: tracecloud_core::DecodeError) -> BusError {
    BusError::Protocol(e.to_string())
}

/// Group membership held by a dedicated connection; closing the connection
/// leaves the group.
#[derive(Debug)]
pub struct RemoteSubscription {
    client: BusClient,
    id: u64,
    topic: String,
}

impl RemoteSubscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub async fn poll(&mut self, max_records: u32, timeout: Duration) -> Result<Vec<ConsumedRecord>, BusError> {
        let timeout_ms = timeout.as_millis().min(u128::from(u32::MAX)) as u32;
        let body = self.client.call(&Request::Poll { subscription: self.id, max_records, timeout_ms }).await?;
        let mut r = Reader::new(&body[1..]);
        let n = r.varint().map_err(proto)?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            out.push(ConsumedRecord {
                partition: r.varint_u32("partition").map_err(proto)?,
                offset: r.varint().map_err(proto)?,
                key: r.len_prefixed().map_err(proto)?.to_vec(),
                value: r.len_prefixed().map_err(proto)?.to_vec(),
            });
        }
        Ok(out)
    }

    pub async fn commit(&mut self, partition: u32, offset: u64) -> Result<(), BusError> {
        self.client.call(&Request::Commit { subscription: self.id, partition, offset }).await?;
        Ok(())
    }

    /// Keeps the membership alive and returns the assigned partitions.
    pub async fn heartbeat(&mut self) -> Result<Vec<u32>, BusError> {
        let body = self.client.call(&Request::Heartbeat { subscription: self.id }).await?;
        let mut r = Reader::new(&body[1..]);
        let n = r.varint().map_err(proto)?;
        (0..n).map(|_| r.varint_u32("partition").map_err(proto)).collect()
    }
}
