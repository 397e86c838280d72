//! Embedded partitioned publish-subscribe broker.
//!
//! Topics are split into partitions holding append-only record logs.
//! Records are routed by a stable hash of their key, so all records of one
//! key are totally ordered. Consumers join consumer groups; each partition
//! of a topic is owned by exactly one live member of a group, and members
//! resume from the group's committed offsets, which gives at-least-once
//! delivery when offsets are committed after processing.
//!
//! The [`Broker`] runs in-process. [`server::serve`] exposes it over a small
//! length-prefixed TCP protocol and [`client::BusClient`] talks to it.

mod broker;
pub mod client;
mod error;
mod group;
pub mod protocol;
pub mod server;
mod storage;

pub use broker::{Broker, BrokerConfig, ConsumedRecord, RecordCoord, Subscription, TopicInfo};
pub use client::{BusClient, RemoteSubscription};
pub use error::BusError;
pub use group::assign_round_robin;

/// Environment variable naming the broker's TCP address.
pub const BUS_ADDR_ENV: &str = "BUS_ADDR";

/// Stable partition for `key` (FNV-1a, independent of process and platform).
pub fn partition_for(key: &[u8], partitions: u32) -> u32 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (hash % u64::from(partitions.max(1))) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitioning_is_stable() {
        // FNV-1a("a") = 0xaf63dc4c8601ec8c
        assert_eq!(partition_for(b"a", u32::MAX), (0xaf63_dc4c_8601_ec8c_u64 % u64::from(u32::MAX)) as u32);
        assert_eq!(partition_for(b"T1", 1), 0);
        assert_eq!(partition_for(b"key", 16), partition_for(b"key", 16));
    }
}
