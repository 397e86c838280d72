//! TCP front end for an in-process [`Broker`].

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::{TcpListener, TcpStream};
use tracecloud_core::varint::{put_len_prefixed, put_varint};
use tracing::{debug, warn};

use crate::broker::{Broker, Subscription};
use crate::error::BusError;
use crate::protocol::{encode_error, read_message, write_message, Request, RESP_OK};

/// Longest poll wait a client may request.
const MAX_POLL_WAIT: Duration = Duration::from_secs(30);

/// Accepts connections forever, one task per connection.
pub async fn serve(broker: Arc<Broker>, listener: TcpListener) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let broker = Arc::clone(&broker);
        tokio::spawn(async move {
            debug!(%peer, "bus client connected");
            if let Err(e) = handle_connection(broker, stream).await {
                debug!(%peer, error = %e, "bus connection ended with error");
            }
        });
    }
}

async fn handle_connection(broker: Arc<Broker>, mut stream: TcpStream) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut subscriptions: HashMap<u64, Subscription> = HashMap::new();
    let mut next_id = 1u64;
    while let Some(body) = read_message(&mut stream).await? {
        let response = match Request::decode(&body) {
            Ok(req) => match handle_request(&broker, &mut subscriptions, &mut next_id, req).await {
                Ok(payload) => payload,
                Err(e) => encode_error(&e),
            },
            Err(e) => {
                warn!(error = %e, "malformed bus request");
                encode_error(&BusError::Protocol(e.to_string()))
            }
        };
        write_message(&mut stream, &response).await?;
    }
    Ok(())
}

async fn handle_request(
    broker: &Arc<Broker>,
    subscriptions: &mut HashMap<u64, Subscription>,
    next_id: &mut u64,
    req: Request,
) -> Result<Vec<u8>, BusError> {
    let mut out = vec![RESP_OK];
    match req {
        Request::Create { topic, partitions } => {
            let info = broker.create_topic(&topic, partitions)?;
            put_varint(&mut out, u64::from(info.partitions));
        }
        Request::Publish { topic, records } => {
            let coords = broker.publish_batch(&topic, &records)?;
            put_varint(&mut out, coords.len() as u64);
            for c in coords {
                put_varint(&mut out, u64::from(c.partition));
                put_varint(&mut out, c.offset);
            }
        }
        Request::Subscribe { topic, group, consumer } => {
            let sub = broker.subscribe(&topic, &group, &consumer)?;
            let id = *next_id;
            *next_id += 1;
            subscriptions.insert(id, sub);
            put_varint(&mut out, id);
        }
        Request::Poll { subscription, max_records, timeout_ms } => {
            let sub = subscriptions.get(&subscription).ok_or(BusError::UnknownSubscription(subscription))?;
            let wait = Duration::from_millis(u64::from(timeout_ms)).min(MAX_POLL_WAIT);
            let records = sub.poll(max_records as usize, wait).await?;
            let size: usize = records.iter().map(|r| r.key.len() + r.value.len() + 16).sum();
            out.reserve(size + 8);
            put_varint(&mut out, records.len() as u64);
            for r in records {
                put_varint(&mut out, u64::from(r.partition));
                put_varint(&mut out, r.offset);
                put_len_prefixed(&mut out, &r.key);
                put_len_prefixed(&mut out, &r.value);
            }
        }
        Request::Commit { subscription, partition, offset } => {
            let sub = subscriptions.get(&subscription).ok_or(BusError::UnknownSubscription(subscription))?;
            sub.commit(partition, offset)?;
        }
        Request::Heartbeat { subscription } => {
            let sub = subscriptions.get(&subscription).ok_or(BusError::UnknownSubscription(subscription))?;
            let assigned = sub.heartbeat()?;
            put_varint(&mut out, assigned.len() as u64);
            for p in assigned {
                put_varint(&mut out, u64::from(p));
            }
        }
    }
    Ok(out)
}
