use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use tracecloud_core::{decode_event_batch, encode_event_batch, TraceEvent};

use crate::error::StoreError;
use crate::rangeset::RangeSet;

/// A segment stops accepting blocks once it reaches this size.
pub const SEGMENT_TARGET_BYTES: u64 = 64 * 1024;

/// Upper bound on events per block, keeping blocks well under a segment.
const MAX_BLOCK_EVENTS: usize = 4096;

/// body_len u32 | crc32 u32 | first_ts u64 | last_ts u64 | min_seq u64 | count u32
const HEADER_LEN: usize = 36;

/// Location and bounds of one stored block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockMeta {
    pub segment: u32,
    pub offset: u64,
    pub body_len: u32,
    pub first_ts: u64,
    pub last_ts: u64,
    pub min_seq: u64,
    pub count: u32,
}

impl BlockMeta {
    pub fn max_seq(&self) -> u64 {
        self.min_seq + u64::from(self.count) - 1
    }

    fn encode_header(&self, body: &[u8]) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&self.body_len.to_le_bytes());
        h[8..16].copy_from_slice(&self.first_ts.to_le_bytes());
        h[16..24].copy_from_slice(&self.last_ts.to_le_bytes());
        h[24..32].copy_from_slice(&self.min_seq.to_le_bytes());
        h[32..36].copy_from_slice(&self.count.to_le_bytes());
        let mut crc = crc32fast::Hasher::new();
        crc.update(&h[8..]);
        crc.update(body);
        h[4..8].copy_from_slice(&crc.finalize().to_le_bytes());
        h
    }

    /// Parses a block at the start of `buf`; `None` if incomplete or damaged.
    fn parse(segment: u32, offset: u64, buf: &[u8]) -> Option<BlockMeta> {
        let h = buf.get(..HEADER_LEN)?;
        let u32_at = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(h[i..i + 8].try_into().unwrap());
        let body_len = u32_at(0);
        let body = buf.get(HEADER_LEN..HEADER_LEN + body_len as usize)?;
        let mut crc = crc32fast::Hasher::new();
        crc.update(&h[8..]);
        crc.update(body);
        if crc.finalize() != u32_at(4) {
            return None;
        }
        let meta = BlockMeta {
            segment,
            offset,
            body_len,
            first_ts: u64_at(8),
            last_ts: u64_at(16),
            min_seq: u64_at(24),
            count: u32_at(32),
        };
        (meta.count > 0 && meta.first_ts <= meta.last_ts && meta.min_seq.checked_add(u64::from(meta.count)).is_some())
            .then_some(meta)
    }

    fn end(&self) -> u64 {
        self.offset + HEADER_LEN as u64 + u64::from(self.body_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AppendOutcome {
    /// Events newly written by this call.
    pub appended: u64,
    /// Distinct events stored for the session after this call.
    pub total: u64,
}

/// Append-only per-session event storage.
///
/// Each process keeps its own sparse index and catches up on blocks written
/// by other processes before every operation. Appends to one session are
/// serialized across processes by an exclusive lock on its `LOCK` file.
pub struct TraceStore {
    root: PathBuf,
    fsync: bool,
    sessions: Mutex<HashMap<u64, Arc<Mutex<SessionTrace>>>>,
}

struct SessionTrace {
    dir: PathBuf,
    lock: File,
    blocks: Vec<BlockMeta>,
    seqs: RangeSet,
    /// Next unread position: segment number and byte offset.
    scan_segment: u32,
    scan_offset: u64,
}

/// Tail of the last segment that failed validation.
struct TornTail {
    segment: u32,
    valid_len: u64,
}

impl TraceStore {
    /// Opens the store rooted at `root` (normally `<DATA_DIR>/traces`).
    pub fn open(root: impl Into<PathBuf>, fsync: bool) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(TraceStore { root, fsync, sessions: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_dir(&self, session_id: u64) -> PathBuf {
        self.root.join(session_id.to_string())
    }

    /// Creates the session directory. Idempotent.
    pub fn create_session(&self, session_id: u64) -> Result<(), StoreError> {
        let dir = self.session_dir(session_id);
        fs::create_dir_all(&dir)?;
        if self.fsync {
            File::open(&self.root)?.sync_all()?;
        }
        Ok(())
    }

    pub fn exists(&self, session_id: u64) -> bool {
        self.session_dir(session_id).is_dir()
    }

    fn handle(&self, session_id: u64) -> Result<Arc<Mutex<SessionTrace>>, StoreError> {
        let mut map = self.sessions.lock();
        if let Some(h) = map.get(&session_id) {
            return Ok(h.clone());
        }
        let dir = self.session_dir(session_id);
        if !dir.is_dir() {
            return Err(StoreError::UnknownSession(session_id));
        }
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(dir.join("LOCK"))?;
        let h = Arc::new(Mutex::new(SessionTrace {
            dir,
            lock,
            blocks: Vec::new(),
            seqs: RangeSet::new(),
            scan_segment: 0,
            scan_offset: 0,
        }));
        map.insert(session_id, h.clone());
        Ok(h)
    }

    /// Stores every event whose seq is not already present.
    pub fn append_events(&self, session_id: u64, events: &[TraceEvent]) -> Result<AppendOutcome, StoreError> {
        let handle = self.handle(session_id)?;
        let mut st = handle.lock();
        st.lock.lock()?;
        let res = st.append_locked(events, self.fsync);
        st.lock.unlock()?;
        res
    }

    /// Events with `from <= timestamp < to`, ordered by timestamp then seq,
    /// at most `limit` of them.
    pub fn query_events(
        &self,
        session_id: u64,
        from_ticks: u64,
        to_ticks: u64,
        limit: usize,
    ) -> Result<Vec<TraceEvent>, StoreError> {
        if from_ticks >= to_ticks || limit == 0 {
            self.handle(session_id)?;
            return Ok(Vec::new());
        }
        let handle = self.handle(session_id)?;
        let mut st = handle.lock();
        st.lock.lock_shared()?;
        let res = st.refresh().and_then(|_| st.query(from_ticks, to_ticks, limit));
        st.lock.unlock()?;
        res
    }

    /// Distinct events stored for the session.
    pub fn event_count(&self, session_id: u64) -> Result<u64, StoreError> {
        let handle = self.handle(session_id)?;
        let mut st = handle.lock();
        st.lock.lock_shared()?;
        let res = st.refresh().map(|_| st.seqs.len());
        st.lock.unlock()?;
        res
    }

    /// Index entries in seq order.
    pub fn blocks(&self, session_id: u64) -> Result<Vec<BlockMeta>, StoreError> {
        let handle = self.handle(session_id)?;
        let mut st = handle.lock();
        st.lock.lock_shared()?;
        let res = st.refresh().map(|_| {
            let mut b = st.blocks.clone();
            b.sort_by_key(|m| m.min_seq);
            b
        });
        st.lock.unlock()?;
        res
    }
}

fn segment_path(dir: &Path, n: u32) -> PathBuf {
    dir.join(format!("seg-{n}.blk"))
}

impl SessionTrace {
    /// Indexes blocks appended since the last scan.
    fn refresh(&mut self) -> Result<Option<TornTail>, StoreError> {
        loop {
            let path = segment_path(&self.dir, self.scan_segment);
            let mut file = match File::open(&path) {
                Ok(f) => f,
                Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            file.seek(SeekFrom::Start(self.scan_offset))?;
            let mut buf = Vec::new();
            file.read_to_end(&mut buf)?;
            let base = self.scan_offset;
            let mut pos = 0usize;
            while pos < buf.len() {
                let Some(meta) = BlockMeta::parse(self.scan_segment, self.scan_offset, &buf[pos..]) else {
                    return Ok(Some(TornTail { segment: self.scan_segment, valid_len: self.scan_offset }));
                };
                self.index(meta)?;
                self.scan_offset = meta.end();
                pos = (self.scan_offset - base) as usize;
            }
            if !segment_path(&self.dir, self.scan_segment + 1).exists() {
                return Ok(None);
            }
            self.scan_segment += 1;
            self.scan_offset = 0;
        }
    }

    fn index(&mut self, meta: BlockMeta) -> Result<(), StoreError> {
        let (lo, hi) = (meta.min_seq, meta.max_seq());
        if self.seqs.ranges().any(|(a, b)| a <= hi && lo <= b) {
            return Err(StoreError::Corrupt(format!(
                "block at {}:{} overlaps stored seqs {lo}..={hi}",
                meta.segment, meta.offset
            )));
        }
        self.seqs.insert_disjoint(lo, hi);
        self.blocks.push(meta);
        Ok(())
    }

    fn append_locked(&mut self, events: &[TraceEvent], fsync: bool) -> Result<AppendOutcome, StoreError> {
        if let Some(torn) = self.refresh()? {
            let f = OpenOptions::new().write(true).open(segment_path(&self.dir, torn.segment))?;
            f.set_len(torn.valid_len)?;
            f.sync_all()?;
            tracing::warn!(dir = %self.dir.display(), segment = torn.segment, len = torn.valid_len, "truncated torn segment tail");
            if self.refresh()?.is_some() {
                return Err(StoreError::Corrupt("segment tail still invalid after truncation".into()));
            }
        }

        let mut fresh: Vec<TraceEvent> = events.iter().filter(|e| !self.seqs.contains(e.seq)).cloned().collect();
        fresh.sort_by_key(|e| e.seq);
        fresh.dedup_by_key(|e| e.seq);
        if fresh.is_empty() {
            return Ok(AppendOutcome { appended: 0, total: self.seqs.len() });
        }

        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=fresh.len() {
            let split = i == fresh.len()
                || fresh[i].seq != fresh[i - 1].seq + 1
                || fresh[i].timestamp_ticks < fresh[i - 1].timestamp_ticks
                || i - start == MAX_BLOCK_EVENTS;
            if split {
                self.write_block(&fresh[start..i], &mut out, fsync)?;
                start = i;
            }
        }
        Ok(AppendOutcome { appended: fresh.len() as u64, total: self.seqs.len() })
    }

    fn write_block(&mut self, run: &[TraceEvent], buf: &mut Vec<u8>, fsync: bool) -> Result<(), StoreError> {
        let first_ts = run[0].timestamp_ticks;
        let body = encode_event_batch(run, first_ts).map_err(|e| StoreError::InvalidEvents(e.to_string()))?;
        let body_len = u32::try_from(body.len()).map_err(|_| StoreError::InvalidEvents("block too large".into()))?;

        let mut segment = self.scan_segment;
        let mut offset = self.scan_offset;
        if offset >= SEGMENT_TARGET_BYTES {
            segment += 1;
            offset = 0;
        }
        let meta = BlockMeta {
            segment,
            offset,
            body_len,
            first_ts,
            last_ts: run[run.len() - 1].timestamp_ticks,
            min_seq: run[0].seq,
            count: run.len() as u32,
        };
        buf.clear();
        buf.extend_from_slice(&meta.encode_header(&body));
        buf.extend_from_slice(&body);

        let path = segment_path(&self.dir, segment);
        let created = !path.exists();
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        file.write_all(buf)?;
        if fsync {
            file.sync_data()?;
            if created {
                File::open(&self.dir)?.sync_all()?;
            }
        }
        self.index(meta)?;
        self.scan_segment = segment;
        self.scan_offset = meta.end();
        Ok(())
    }

    fn query(&self, from: u64, to: u64, limit: usize) -> Result<Vec<TraceEvent>, StoreError> {
        let mut hits: Vec<&BlockMeta> = self.blocks.iter().filter(|b| b.first_ts < to && b.last_ts >= from).collect();
        hits.sort_by_key(|b| (b.first_ts, b.min_seq));

        let mut files: HashMap<u32, File> = HashMap::new();
        let mut out = Vec::new();
        let mut body = Vec::new();
        for b in hits {
            if out.len() >= limit && out.iter().map(|e: &TraceEvent| e.timestamp_ticks).max() < Some(b.first_ts) {
                break;
            }
            let file = match files.entry(b.segment) {
                std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(File::open(segment_path(&self.dir, b.segment))?)
                }
            };
            body.resize(b.body_len as usize, 0);
            file.read_exact_at(&mut body, b.offset + HEADER_LEN as u64)?;
            let events = decode_event_batch(&body, b.first_ts)
                .map_err(|e| StoreError::Corrupt(format!("block at {}:{}: {e}", b.segment, b.offset)))?;
            out.extend(events.into_iter().filter(|e| e.timestamp_ticks >= from && e.timestamp_ticks < to));
        }
        out.sort_by_key(|e| (e.timestamp_ticks, e.seq));
        out.truncate(limit);
        Ok(out)
    }
}
