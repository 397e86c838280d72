use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use tokio::sync::Notify;
use tracing::{debug, info};

use crate::error::BusError;
use crate::group::Group;
use crate::partition_for;
use crate::storage::{write_offset, DataDir, PartitionLog};

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Persist partition logs and committed offsets here; memory only if unset.
    pub data_dir: Option<PathBuf>,
    /// `fsync` partition files after every publish batch and offset commit.
    pub fsync_per_batch: bool,
    /// Members silent for longer than this are removed from their group.
    pub session_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self { data_dir: None, fsync_per_batch: false, session_timeout: Duration::from_secs(10) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicInfo {
    pub name: String,
    pub partitions: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordCoord {
    pub partition: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsumedRecord {
    pub partition: u32,
    pub offset: u64,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

struct Topic {
    partitions: Vec<Mutex<PartitionLog>>,
    notify: Notify,
}

type GroupKey = (String, String);

pub struct Broker {
    config: BrokerConfig,
    dir: Option<DataDir>,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    groups: Mutex<HashMap<GroupKey, Group>>,
    saved_offsets: Mutex<HashMap<GroupKey, HashMap<u32, u64>>>,
    offsets_out: Mutex<Option<BufWriter<File>>>,
    next_token: AtomicU64,
}

fn validate_name(kind: &str, name: &str) -> Result<(), BusError> {
    let ok = !name.is_empty()
        && name.len() <= 200
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(BusError::InvalidTopic(format!("{kind} name {name:?}")))
    }
}

impl Broker {
    pub fn in_memory() -> Arc<Self> {
        Self::open(BrokerConfig::default()).expect("in-memory broker cannot fail")
    }

    /// Opens a broker, reloading topics and offsets from `data_dir` if set.
    pub fn open(config: BrokerConfig) -> Result<Arc<Self>, BusError> {
        let dir = config.data_dir.as_ref().map(DataDir::new).transpose()?;
        let mut topics = HashMap::new();
        let mut saved = HashMap::new();
        let mut offsets_out = None;
        if let Some(dir) = &dir {
            for (name, logs) in dir.load_topics()? {
                info!(topic = %name, partitions = logs.len(), "recovered topic");
                topics.insert(
                    name,
                    Arc::new(Topic { partitions: logs.into_iter().map(Mutex::new).collect(), notify: Notify::new() }),
                );
            }
            saved = dir.load_offsets()?;
            offsets_out = Some(dir.open_offsets_writer()?);
        }
        Ok(Arc::new(Self {
            config,
            dir,
            topics: RwLock::new(topics),
            groups: Mutex::new(HashMap::new()),
            saved_offsets: Mutex::new(saved),
            offsets_out: Mutex::new(offsets_out),
            next_token: AtomicU64::new(1),
        }))
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn create_topic(&self, name: &str, partitions: u32) -> Result<TopicInfo, BusError> {
        validate_name("topic", name)?;
        if partitions == 0 {
            return Err(BusError::InvalidTopic(format!("{name}: partitions must be >= 1")));
        }
        let mut topics = self.topics.write();
        if topics.contains_key(name) {
            return Err(BusError::TopicExists(name.to_owned()));
        }
        let logs = match &self.dir {
            Some(dir) => dir.create_topic(name, partitions)?,
            None => (0..partitions).map(|_| PartitionLog::in_memory()).collect(),
        };
        topics.insert(
            name.to_owned(),
            Arc::new(Topic { partitions: logs.into_iter().map(Mutex::new).collect(), notify: Notify::new() }),
        );
        debug!(topic = name, partitions, "created topic");
        Ok(TopicInfo { name: name.to_owned(), partitions })
    }

    /// Creates the topic unless it already exists.
    pub fn ensure_topic(&self, name: &str, partitions: u32) -> Result<TopicInfo, BusError> {
        match self.create_topic(name, partitions) {
            Err(BusError::TopicExists(_)) => self.topic_info(name),
            other => other,
        }
    }

    pub fn topic_info(&self, name: &str) -> Result<TopicInfo, BusError> {
        let topic = self.topic(name)?;
        Ok(TopicInfo { name: name.to_owned(), partitions: topic.partitions.len() as u32 })
    }

    pub fn topics(&self) -> Vec<TopicInfo> {
        let mut out: Vec<_> = self
            .topics
            .read()
            .iter()
            .map(|(name, t)| TopicInfo { name: name.clone(), partitions: t.partitions.len() as u32 })
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, BusError> {
        self.topics.read().get(name).cloned().ok_or_else(|| BusError::UnknownTopic(name.to_owned()))
    }

    /// Number of records in a partition.
    pub fn log_end(&self, topic: &str, partition: u32) -> Result<u64, BusError> {
        let topic = self.topic(topic)?;
        let log = topic.partitions.get(partition as usize).ok_or(BusError::RevokedPartition { partition })?;
        let len = log.lock().len();
        Ok(len)
    }

    pub fn publish(&self, topic: &str, key: &[u8], value: &[u8]) -> Result<RecordCoord, BusError> {
        Ok(self.publish_batch(topic, &[(key, value)])?[0])
    }

    /// Appends records in order; returns their coordinates in input order.
    /// Each touched partition is flushed once at the end.
    pub fn publish_batch<K, V>(&self, topic_name: &str, records: &[(K, V)]) -> Result<Vec<RecordCoord>, BusError>
    where
        K: AsRef<[u8]>,
        V: AsRef<[u8]>,
    {
        let topic = self.topic(topic_name)?;
        let n = topic.partitions.len() as u32;
        let mut coords = Vec::with_capacity(records.len());
        let mut touched: Vec<u32> = Vec::new();
        let mut current: Option<(u32, parking_lot::MutexGuard<'_, PartitionLog>)> = None;
        for (key, value) in records {
            let p = partition_for(key.as_ref(), n);
            if current.as_ref().map(|(cp, _)| *cp) != Some(p) {
                // Release the previous partition before taking the next one.
                drop(current.take());
                current = Some((p, topic.partitions[p as usize].lock()));
                if !touched.contains(&p) {
                    touched.push(p);
                }
            }
            let log = &mut current.as_mut().expect("locked above").1;
            let offset = log.append(key.as_ref(), value.as_ref())?;
            coords.push(RecordCoord { partition: p, offset });
        }
        drop(current);
        for p in touched {
            topic.partitions[p as usize].lock().flush(self.config.fsync_per_batch)?;
        }
        topic.notify.notify_waiters();
        Ok(coords)
    }

    /// Joins `group_id` on `topic` as `consumer_id`, replacing any previous
    /// member with the same id.
    pub fn subscribe(
        self: &Arc<Self>,
        topic: &str,
        group_id: &str,
        consumer_id: &str,
    ) -> Result<Subscription, BusError> {
        validate_name("group", group_id)?;
        validate_name("consumer", consumer_id)?;
        let t = self.topic(topic)?;
        let token = self.next_token.fetch_add(1, Ordering::Relaxed);
        let key = (topic.to_owned(), group_id.to_owned());
        {
            let mut groups = self.groups.lock();
            let group = groups.entry(key.clone()).or_insert_with(|| {
                let saved = self.saved_offsets.lock().remove(&key).unwrap_or_default();
                let committed = (0..t.partitions.len() as u32).map(|p| saved.get(&p).copied().unwrap_or(0)).collect();
                Group::new(t.partitions.len() as u32, committed)
            });
            group.join(consumer_id, token);
            info!(topic, group = group_id, consumer = consumer_id, generation = group.generation(), "member joined");
        }
        t.notify.notify_waiters();
        Ok(Subscription {
            broker: Arc::clone(self),
            topic: topic.to_owned(),
            group_id: group_id.to_owned(),
            consumer_id: consumer_id.to_owned(),
            token,
        })
    }

    fn with_group<R>(
        &self,
        topic: &str,
        group_id: &str,
        token: u64,
        f: impl FnOnce(&mut Group, &str) -> Result<R, BusError>,
    ) -> Result<R, BusError> {
        let mut groups = self.groups.lock();
        let group = groups.get_mut(&(topic.to_owned(), group_id.to_owned())).ok_or(BusError::UnknownMember)?;
        group.expire(self.config.session_timeout);
        if !group.touch(token) {
            return Err(BusError::UnknownMember);
        }
        let member = group.member_id(token).expect("touched member exists").to_owned();
        f(group, &member)
    }

    fn leave(&self, topic: &str, group_id: &str, token: u64) {
        let left = {
            let mut groups = self.groups.lock();
            groups.get_mut(&(topic.to_owned(), group_id.to_owned())).is_some_and(|g| g.leave(token))
        };
        if left {
            info!(topic, group = group_id, "member left");
            if let Ok(t) = self.topic(topic) {
                t.notify.notify_waiters();
            }
        }
    }

    /// One non-blocking fetch attempt for `token`.
    fn try_fetch(
        &self,
        topic: &Topic,
        topic_name: &str,
        group_id: &str,
        token: u64,
        max: usize,
    ) -> Result<Vec<ConsumedRecord>, BusError> {
        let mut plan: Vec<(u32, u64, u64)> = Vec::new();
        let released = self.with_group(topic_name, group_id, token, |group, member| {
            // Polling again means everything handed out earlier is done.
            let released = group.release(token);
            let released_foreign = released.iter().any(|&p| !group.is_assigned(p, member));
            for p in group.fetchable(member, token) {
                let from = group.committed(p);
                let end = topic.partitions[p as usize].lock().len();
                if end > from {
                    plan.push((p, from, end));
                }
            }
            if !plan.is_empty() {
                let quota = max.div_ceil(plan.len()).max(1) as u64;
                let mut budget = max as u64;
                for entry in &mut plan {
                    let take = (entry.2 - entry.1).min(quota).min(budget);
                    entry.2 = entry.1 + take;
                    budget -= take;
                }
                plan.retain(|(_, from, to)| to > from);
                for &(p, _, _) in &plan {
                    group.hold(p, token);
                }
            }
            Ok(released_foreign)
        })?;
        if released {
            topic.notify.notify_waiters();
        }
        let mut out = Vec::with_capacity(plan.iter().map(|(_, f, t)| (t - f) as usize).sum());
        for (p, from, to) in plan {
            let log = topic.partitions[p as usize].lock();
            for offset in from..to {
                let (key, value) = log.get(offset).expect("offset below log end");
                out.push(ConsumedRecord { partition: p, offset, key: key.to_vec(), value: value.to_vec() });
            }
        }
        Ok(out)
    }

    async fn poll(
        &self,
        topic_name: &str,
        group_id: &str,
        token: u64,
        max: usize,
        timeout: Duration,
    ) -> Result<Vec<ConsumedRecord>, BusError> {
        let topic = self.topic(topic_name)?;
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = topic.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let records = self.try_fetch(&topic, topic_name, group_id, token, max.max(1))?;
            if !records.is_empty() {
                return Ok(records);
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Ok(Vec::new());
            }
        }
    }

    fn commit(
        &self,
        topic_name: &str,
        group_id: &str,
        token: u64,
        partition: u32,
        offset: u64,
    ) -> Result<(), BusError> {
        let topic = self.topic(topic_name)?;
        self.with_group(topic_name, group_id, token, |group, member| {
            if !group.is_assigned(partition, member) {
                return Err(BusError::RevokedPartition { partition });
            }
            let end = topic.partitions[partition as usize].lock().len();
            if offset > end {
                return Err(BusError::OffsetOutOfRange { partition, offset });
            }
            group.set_committed(partition, offset);
            if let Some(out) = self.offsets_out.lock().as_mut() {
                write_offset(out, topic_name, group_id, partition, offset, self.config.fsync_per_batch)?;
            }
            Ok(())
        })
    }

    /// Committed offset of a group on a partition (0 if never committed).
    pub fn committed(&self, topic: &str, group_id: &str, partition: u32) -> Option<u64> {
        let groups = self.groups.lock();
        groups.get(&(topic.to_owned(), group_id.to_owned())).map(|g| g.committed(partition))
    }
}

/// A consumer group membership. Dropping it leaves the group.
pub struct Subscription {
    broker: Arc<Broker>,
    topic: String,
    group_id: String,
    consumer_id: String,
    token: u64,
}

impl std::fmt::Debug for Subscription {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subscription")
            .field("topic", &self.topic)
            .field("group_id", &self.group_id)
            .field("consumer_id", &self.consumer_id)
            .finish()
    }
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn consumer_id(&self) -> &str {
        &self.consumer_id
    }

    /// Up to `max` records from assigned partitions, starting at the
    /// committed offsets, in offset order per partition. Waits up to
    /// `timeout` for data; an empty result means the wait expired.
    pub async fn poll(&self, max: usize, timeout: Duration) -> Result<Vec<ConsumedRecord>, BusError> {
        self.broker.poll(&self.topic, &self.group_id, self.token, max, timeout).await
    }

    /// Marks everything below `offset` in `partition` as processed.
    pub fn commit(&self, partition: u32, offset: u64) -> Result<(), BusError> {
        self.broker.commit(&self.topic, &self.group_id, self.token, partition, offset)
    }

    /// Keeps the membership alive; returns the current assignment.
    pub fn heartbeat(&self) -> Result<Vec<u32>, BusError> {
        self.assignment()
    }

    pub fn assignment(&self) -> Result<Vec<u32>, BusError> {
        self.broker.with_group(&self.topic, &self.group_id, self.token, |g, member| Ok(g.assigned(member)))
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.broker.leave(&self.topic, &self.group_id, self.token);
    }
}
