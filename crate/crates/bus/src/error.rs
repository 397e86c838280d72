use thiserror::Error;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("topic {0} already exists")]
    TopicExists(String),
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
    #[error("partition {partition} is not assigned to this consumer")]
    RevokedPartition { partition: u32 },
    #[error("offset {offset} beyond end of partition {partition}")]
    OffsetOutOfRange { partition: u32, offset: u64 },
    #[error("consumer is no longer a group member")]
    UnknownMember,
    #[error("unknown subscription {0}")]
    UnknownSubscription(u64),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("broker connection closed")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BusError {
    /// Wire code used by the TCP protocol.
    pub fn code(&self) -> u8 {
        match self {
            BusError::TopicExists(_) => 1,
            BusError::UnknownTopic(_) => 2,
            BusError::InvalidTopic(_) => 3,
            BusError::RevokedPartition { .. } => 4,
            BusError::OffsetOutOfRange { .. } => 5,
            BusError::UnknownMember => 6,
            BusError::UnknownSubscription(_) => 7,
            BusError::Protocol(_) => 8,
            BusError::Disconnected | BusError::Io(_) => 9,
        }
    }
}
