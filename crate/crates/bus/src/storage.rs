//! On-disk layout of a broker data directory.
//!
//! ```text
//! <dir>/topics/<topic>/partitions   decimal partition count
//! <dir>/topics/<topic>/<p>.log      records: u32 LE key_len ‖ key ‖ u32 LE value_len ‖ value
//! <dir>/offsets.log                 "topic\tgroup\tpartition\toffset" lines, last one wins
//! ```
//!
//! Appends go to the OS page cache; `fsync` is only issued when the broker
//! runs with `fsync_per_batch`. A torn record at the end of a log is cut off
//! on recovery.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// In-memory copy of a partition plus its optional backing file.
#[derive(Debug, Default)]
pub(crate) struct PartitionLog {
    arena: Vec<u8>,
    starts: Vec<usize>,
    file: Option<BufWriter<File>>,
}

impl PartitionLog {
    pub(crate) fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the log at `path`, loading any existing records.
    pub(crate) fn open(path: &Path) -> io::Result<Self> {
        let mut arena = Vec::new();
        if path.exists() {
            File::open(path)?.read_to_end(&mut arena)?;
        }
        let mut starts = Vec::new();
        let mut pos = 0usize;
        while let Some(len) = record_len(&arena[pos..]) {
            starts.push(pos);
            pos += len;
        }
        if pos < arena.len() {
            tracing::warn!(path = %path.display(), dropped = arena.len() - pos, "truncating torn record");
            arena.truncate(pos);
            OpenOptions::new().write(true).open(path)?.set_len(pos as u64)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { arena, starts, file: Some(BufWriter::with_capacity(64 * 1024, file)) })
    }

    pub(crate) fn len(&self) -> u64 {
        self.starts.len() as u64
    }

    pub(crate) fn append(&mut self, key: &[u8], value: &[u8]) -> io::Result<u64> {
        let start = self.arena.len();
        self.arena.extend_from_slice(&(key.len() as u32).to_le_bytes());
        self.arena.extend_from_slice(key);
        self.arena.extend_from_slice(&(value.len() as u32).to_le_bytes());
        self.arena.extend_from_slice(value);
        if let Some(file) = &mut self.file {
            if let Err(e) = file.write_all(&self.arena[start..]) {
                self.arena.truncate(start);
                return Err(e);
            }
        }
        self.starts.push(start);
        Ok(self.starts.len() as u64 - 1)
    }

    /// Pushes buffered appends to the OS, optionally waiting for the disk.
    pub(crate) fn flush(&mut self, fsync: bool) -> io::Result<()> {
        if let Some(file) = &mut self.file {
            file.flush()?;
            if fsync {
                file.get_ref().sync_data()?;
            }
        }
        Ok(())
    }

    /// Key and value of the record at `offset`.
    pub(crate) fn get(&self, offset: u64) -> Option<(&[u8], &[u8])> {
        let start = *self.starts.get(offset as usize)?;
        let buf = &self.arena[start..];
        let klen = u32::from_le_bytes(buf[..4].try_into().ok()?) as usize;
        let key = &buf[4..4 + klen];
        let rest = &buf[4 + klen..];
        let vlen = u32::from_le_bytes(rest[..4].try_into().ok()?) as usize;
        Some((key, &rest[4..4 + vlen]))
    }
}

/// Total length of the complete record at the front of `buf`, if any.
fn record_len(buf: &[u8]) -> Option<usize> {
    let klen = u32::from_le_bytes(buf.get(..4)?.try_into().ok()?) as usize;
    let vstart = 4 + klen;
    let vlen = u32::from_le_bytes(buf.get(vstart..vstart + 4)?.try_into().ok()?) as usize;
    let end = vstart + 4 + vlen;
    (buf.len() >= end).then_some(end)
}

#[derive(Debug, Clone)]
pub(crate) struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub(crate) fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("topics"))?;
        Ok(Self { root })
    }

    pub(crate) fn topic_dir(&self, topic: &str) -> PathBuf {
        self.root.join("topics").join(topic)
    }

    pub(crate) fn create_topic(&self, topic: &str, partitions: u32) -> io::Result<Vec<PartitionLog>> {
        let dir = self.topic_dir(topic);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("partitions"), partitions.to_string())?;
        (0..partitions).map(|p| PartitionLog::open(&dir.join(format!("{p}.log")))).collect()
    }

    /// Every persisted topic with its reloaded partitions.
    pub(crate) fn load_topics(&self) -> io::Result<Vec<(String, Vec<PartitionLog>)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("topics"))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Ok(count) = fs::read_to_string(entry.path().join("partitions")) else {
                continue;
            };
            let partitions: u32 = count
                .trim()
                .parse()
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, format!("bad partition count for {name}")))?;
            let logs = (0..partitions)
                .map(|p| PartitionLog::open(&entry.path().join(format!("{p}.log"))))
                .collect::<io::Result<Vec<_>>>()?;
            out.push((name, logs));
        }
        Ok(out)
    }

    fn offsets_path(&self) -> PathBuf {
        self.root.join("offsets.log")
    }

    /// Last committed offset per (topic, group, partition).
    pub(crate) fn load_offsets(&self) -> io::Result<HashMap<(String, String), HashMap<u32, u64>>> {
        let mut out: HashMap<(String, String), HashMap<u32, u64>> = HashMap::new();
        let path = self.offsets_path();
        if !path.exists() {
            return Ok(out);
        }
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let fields: Vec<&str> = line.split('\t').collect();
            if let [topic, group, partition, offset] = fields[..] {
                if let (Ok(p), Ok(o)) = (partition.parse(), offset.parse()) {
                    out.entry((topic.to_owned(), group.to_owned())).or_default().insert(p, o);
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn open_offsets_writer(&self) -> io::Result<BufWriter<File>> {
        let file = OpenOptions::new().create(true).append(true).open(self.offsets_path())?;
        Ok(BufWriter::new(file))
    }
}

pub(crate) fn write_offset(
    out: &mut BufWriter<File>,
    topic: &str,
    group: &str,
    partition: u32,
    offset: u64,
    fsync: bool,
) -> io::Result<()> {
    writeln!(out, "{topic}\t{group}\t{partition}\t{offset}")?;
    out.flush()?;
    if fsync {
        out.get_ref().sync_data()?;
    }
    Ok(())
}
