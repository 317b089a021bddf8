//! In-process log broker.
//!
//! Topics are split into partitions; each partition is an append-only log
//! addressed by a dense offset starting at 0. Consumers pull contiguous
//! offset ranges and commit their position per consumer group. Retention
//! trims the head of a partition by size or age; the high-water mark never
//! moves backwards.

mod segment;

pub use segment::{decode_frames, encode_frame, frame_len, Frame, MAGIC, NO_KEY};

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock;
use segment::Segment;

/// Default per-record payload ceiling (64 MiB).
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("topic `{0}` already exists")]
    DuplicateTopic(String),
    #[error("invalid topic config: {0}")]
    InvalidConfig(String),
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("partition {partition} out of range for topic `{topic}` ({partitions} partitions)")]
    PartitionOutOfRange { topic: String, partition: u32, partitions: u32 },
    #[error("payload of {size} bytes exceeds limit of {max} bytes")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("offset {offset} out of range [{earliest}, {latest}] for {topic}/{partition}")]
    OffsetOutOfRange { topic: String, partition: u32, offset: u64, earliest: u64, latest: u64 },
    #[error("commit of offset {offset} for {topic}/{partition} is beyond latest {latest}")]
    OffsetAhead { topic: String, partition: u32, offset: u64, latest: u64 },
    #[error("stale commit for {topic}/{partition}: {offset} < committed {committed}")]
    StaleCommit { topic: String, partition: u32, offset: u64, committed: u64 },
    #[error("broker storage: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BrokerError>;

/// One broker message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub topic: Arc<str>,
    pub partition: u32,
    pub offset: u64,
    /// Milliseconds since the Unix epoch.
    pub event_time: u64,
    pub key: Option<Bytes>,
    pub payload: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub name: String,
    pub partitions: u32,
    #[serde(default)]
    pub retention_bytes: Option<u64>,
    #[serde(default)]
    pub retention_ms: Option<u64>,
}

impl TopicConfig {
    pub fn new(name: impl Into<String>, partitions: u32) -> Self {
        TopicConfig { name: name.into(), partitions, retention_bytes: None, retention_ms: None }
    }

    pub fn with_retention_bytes(mut self, bytes: u64) -> Self {
        self.retention_bytes = Some(bytes);
        self
    }

    pub fn with_retention_ms(mut self, ms: u64) -> Self {
        self.retention_ms = Some(ms);
        self
    }
}

/// Where an appended record goes.
#[derive(Debug, Clone)]
pub enum Target {
    Partition(u32),
    /// `fnv1a(key) mod partitions`.
    Key(Bytes),
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appended {
    pub partition: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResult {
    pub records: Vec<Record>,
    pub next_offset: u64,
}

/// Committed positions of one consumer group: (topic, partition) -> next offset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConsumerGroupState {
    pub group: String,
    pub committed: BTreeMap<(String, u32), u64>,
}

impl ConsumerGroupState {
    pub fn for_topic(&self, topic: &str) -> BTreeMap<u32, u64> {
        self.committed
            .iter()
            .filter(|((t, _), _)| t == topic)
            .map(|((_, p), o)| (*p, *o))
            .collect()
    }
}

/// Stable 64-bit FNV-1a; key partitioning must not depend on process state.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

struct PartitionLog {
    earliest: u64,
    records: VecDeque<Record>,
    bytes: u64,
    segment: Option<Segment>,
}

impl PartitionLog {
    fn latest(&self) -> u64 {
        self.earliest + self.records.len() as u64
    }

    fn trim_front(&mut self) {
        if let Some(r) = self.records.pop_front() {
            self.bytes -= r.payload.len() as u64;
            self.earliest += 1;
        }
    }
}

struct Topic {
    config: TopicConfig,
    name: Arc<str>,
    partitions: Vec<RwLock<PartitionLog>>,
    round_robin: AtomicUsize,
}

impl Topic {
    fn partition(&self, partition: u32) -> Result<&RwLock<PartitionLog>> {
        self.partitions.get(partition as usize).ok_or_else(|| BrokerError::PartitionOutOfRange {
            topic: self.config.name.clone(),
            partition,
            partitions: self.config.partitions,
        })
    }
}

struct BrokerInner {
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    groups: Mutex<HashMap<String, ConsumerGroupState>>,
    max_payload: usize,
    data_dir: Option<PathBuf>,
}

/// Cloneable handle to one broker instance.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<BrokerInner>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("topics", &self.topic_names())
            .field("data_dir", &self.inner.data_dir)
            .finish()
    }
}

impl Default for Broker {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Broker {
    pub fn in_memory() -> Self {
        Self::with_options(DEFAULT_MAX_PAYLOAD, None)
    }

    pub fn with_max_payload(max_payload: usize) -> Self {
        Self::with_options(max_payload, None)
    }

    fn with_options(max_payload: usize, data_dir: Option<PathBuf>) -> Self {
        Broker {
            inner: Arc::new(BrokerInner {
                topics: RwLock::new(HashMap::new()),
                groups: Mutex::new(HashMap::new()),
                max_payload,
                data_dir,
            }),
        }
    }

    /// Opens (or creates) a disk-backed broker rooted at `dir`, reloading every
    /// topic found there.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_max_payload(dir, DEFAULT_MAX_PAYLOAD)
    }

    pub fn open_with_max_payload(dir: impl AsRef<Path>, max_payload: usize) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let broker = Self::with_options(max_payload, Some(dir.clone()));
        let mut entries: Vec<_> = fs::read_dir(&dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let meta_path = entry.path().join("topic.json");
            if !meta_path.is_file() {
                continue;
            }
            let config: TopicConfig = serde_json::from_slice(&fs::read(&meta_path)?)
                .map_err(|e| BrokerError::InvalidConfig(format!("{}: {e}", meta_path.display())))?;
            let topic_dir = entry.path();
            let name: Arc<str> = Arc::from(config.name.as_str());
            let mut partitions = Vec::with_capacity(config.partitions as usize);
            for p in 0..config.partitions {
                let (earliest, frames) = Segment::load(&topic_dir, p)?;
                let mut log = PartitionLog {
                    earliest,
                    records: VecDeque::with_capacity(frames.len()),
                    bytes: 0,
                    segment: Some(Segment::open(&topic_dir, p)?),
                };
                for f in frames {
                    if f.offset != log.latest() {
                        return Err(BrokerError::Io(std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("gap in segment {}/{p} at offset {}", config.name, f.offset),
                        )));
                    }
                    log.bytes += f.payload.len() as u64;
                    log.records.push_back(Record {
                        topic: name.clone(),
                        partition: p,
                        offset: f.offset,
                        event_time: f.event_time,
                        key: f.key,
                        payload: f.payload,
                    });
                }
                partitions.push(RwLock::new(log));
            }
            let topic = Topic { config: config.clone(), name, partitions, round_robin: AtomicUsize::new(0) };
            broker.inner.topics.write().insert(config.name, Arc::new(topic));
        }
        Ok(broker)
    }

    pub fn is_persistent(&self) -> bool {
        self.inner.data_dir.is_some()
    }

    pub fn max_payload(&self) -> usize {
        self.inner.max_payload
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.inner.topics.read().keys().cloned().collect();
        names.sort();
        names
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>> {
        self.inner
            .topics
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_string()))
    }

    pub fn topic_config(&self, name: &str) -> Result<TopicConfig> {
        Ok(self.topic(name)?.config.clone())
    }

    pub fn create_topic(&self, config: TopicConfig) -> Result<TopicConfig> {
        if config.partitions == 0 {
            return Err(BrokerError::InvalidConfig("partitions must be at least 1".into()));
        }
        if config.name.is_empty() || config.name.contains(['/', '\\']) {
            return Err(BrokerError::InvalidConfig(format!("bad topic name `{}`", config.name)));
        }
        let mut topics = self.inner.topics.write();
        if topics.contains_key(&config.name) {
            return Err(BrokerError::DuplicateTopic(config.name));
        }
        let topic_dir = self.inner.data_dir.as_ref().map(|d| d.join(&config.name));
        if let Some(dir) = &topic_dir {
            fs::create_dir_all(dir)?;
            let meta = serde_json::to_vec_pretty(&config).expect("topic config serializes");
            fs::write(dir.join("topic.json"), meta)?;
        }
        let mut partitions = Vec::with_capacity(config.partitions as usize);
        for p in 0..config.partitions {
            let segment = match &topic_dir {
                Some(dir) => Some(Segment::open(dir, p)?),
                None => None,
            };
            partitions.push(RwLock::new(PartitionLog {
                earliest: 0,
                records: VecDeque::new(),
                bytes: 0,
                segment,
            }));
        }
        let topic = Topic {
            name: Arc::from(config.name.as_str()),
            config: config.clone(),
            partitions,
            round_robin: AtomicUsize::new(0),
        };
        topics.insert(config.name.clone(), Arc::new(topic));
        Ok(config)
    }

    pub fn append(
        &self,
        topic: &str,
        target: Target,
        payload: impl Into<Bytes>,
        event_time: u64,
    ) -> Result<Appended> {
        let t = self.topic(topic)?;
        let n = t.config.partitions;
        let (partition, key) = match target {
            Target::Partition(p) => (p, None),
            Target::Key(k) => ((fnv1a(&k) % u64::from(n)) as u32, Some(k)),
            Target::RoundRobin => ((t.round_robin.fetch_add(1, Ordering::Relaxed) % n as usize) as u32, None),
        };
        self.append_to(&t, partition, key, payload.into(), event_time)
    }

    /// Appends a keyed record to an explicit partition, bypassing the key hash.
    pub fn append_keyed(
        &self,
        topic: &str,
        partition: u32,
        key: Bytes,
        payload: impl Into<Bytes>,
        event_time: u64,
    ) -> Result<Appended> {
        let t = self.topic(topic)?;
        self.append_to(&t, partition, Some(key), payload.into(), event_time)
    }

    fn append_to(
        &self,
        topic: &Topic,
        partition: u32,
        key: Option<Bytes>,
        payload: Bytes,
        event_time: u64,
    ) -> Result<Appended> {
        if payload.len() > self.inner.max_payload {
            return Err(BrokerError::PayloadTooLarge { size: payload.len(), max: self.inner.max_payload });
        }
        let mut log = topic.partition(partition)?.write();
        let offset = log.latest();
        if let Some(segment) = log.segment.as_mut() {
            segment.append(offset, event_time, key.as_deref(), &payload)?;
        }
        log.bytes += payload.len() as u64;
        log.records.push_back(Record {
            topic: topic.name.clone(),
            partition,
            offset,
            event_time,
            key,
            payload,
        });
        Ok(Appended { partition, offset })
    }

    /// Contiguous records from `from_offset`, bounded by `max_bytes` of payload
    /// but always at least one record when any are available.
    pub fn fetch(&self, topic: &str, partition: u32, from_offset: u64, max_bytes: usize) -> Result<FetchResult> {
        let t = self.topic(topic)?;
        let log = t.partition(partition)?.read();
        let latest = log.latest();
        if from_offset < log.earliest || from_offset > latest {
            return Err(BrokerError::OffsetOutOfRange {
                topic: topic.to_string(),
                partition,
                offset: from_offset,
                earliest: log.earliest,
                latest,
            });
        }
        let mut records = Vec::new();
        let mut bytes = 0usize;
        let start = (from_offset - log.earliest) as usize;
        for r in log.records.range(start..) {
            if !records.is_empty() && bytes + r.payload.len() > max_bytes {
                break;
            }
            bytes += r.payload.len();
            records.push(r.clone());
        }
        let next_offset = from_offset + records.len() as u64;
        Ok(FetchResult { records, next_offset })
    }

    /// Every record in `[start, end)`, fetched in `max_bytes` chunks.
    pub fn fetch_range(&self, topic: &str, partition: u32, start: u64, end: u64) -> Result<Vec<Record>> {
        let mut out = Vec::with_capacity((end.saturating_sub(start)) as usize);
        let mut next = start;
        while next < end {
            let chunk = self.fetch(topic, partition, next, 16 * 1024 * 1024)?;
            if chunk.records.is_empty() {
                let latest = self.latest_offsets(topic)?[partition as usize];
                return Err(BrokerError::OffsetOutOfRange {
                    topic: topic.to_string(),
                    partition,
                    offset: end,
                    earliest: start,
                    latest,
                });
            }
            for r in chunk.records {
                if r.offset >= end {
                    break;
                }
                out.push(r);
            }
            next = chunk.next_offset.min(end);
        }
        Ok(out)
    }

    pub fn latest_offsets(&self, topic: &str) -> Result<Vec<u64>> {
        let t = self.topic(topic)?;
        Ok(t.partitions.iter().map(|p| p.read().latest()).collect())
    }

    pub fn earliest_offsets(&self, topic: &str) -> Result<Vec<u64>> {
        let t = self.topic(topic)?;
        Ok(t.partitions.iter().map(|p| p.read().earliest).collect())
    }

    /// Retained payload bytes per partition.
    pub fn retained_bytes(&self, topic: &str) -> Result<Vec<u64>> {
        let t = self.topic(topic)?;
        Ok(t.partitions.iter().map(|p| p.read().bytes).collect())
    }

    /// Commits next-to-read offsets for `group`. Validated as a whole and then
    /// applied as a whole; a rejected call changes nothing.
    pub fn commit_offsets(&self, group: &str, topic: &str, offsets: &BTreeMap<u32, u64>) -> Result<()> {
        let latest = self.latest_offsets(topic)?;
        let mut groups = self.inner.groups.lock();
        let state = groups.entry(group.to_string()).or_insert_with(|| ConsumerGroupState {
            group: group.to_string(),
            committed: BTreeMap::new(),
        });
        for (&partition, &offset) in offsets {
            let Some(&hw) = latest.get(partition as usize) else {
                return Err(BrokerError::PartitionOutOfRange {
                    topic: topic.to_string(),
                    partition,
                    partitions: latest.len() as u32,
                });
            };
            if offset > hw {
                return Err(BrokerError::OffsetAhead { topic: topic.to_string(), partition, offset, latest: hw });
            }
            if let Some(&committed) = state.committed.get(&(topic.to_string(), partition)) {
                if offset < committed {
                    return Err(BrokerError::StaleCommit {
                        topic: topic.to_string(),
                        partition,
                        offset,
                        committed,
                    });
                }
            }
        }
        for (&partition, &offset) in offsets {
            state.committed.insert((topic.to_string(), partition), offset);
        }
        Ok(())
    }

    pub fn fetch_committed(&self, group: &str) -> ConsumerGroupState {
        self.inner.groups.lock().get(group).cloned().unwrap_or_else(|| ConsumerGroupState {
            group: group.to_string(),
            committed: BTreeMap::new(),
        })
    }

    /// Applies the topic's size and age limits against the wall clock.
    pub fn enforce_retention(&self, topic: &str) -> Result<Vec<u64>> {
        self.enforce_retention_at(topic, clock::now_ms())
    }

    /// Retention with an explicit "now" (ms since epoch). Returns the earliest
    /// offset per partition after trimming.
    pub fn enforce_retention_at(&self, topic: &str, now_ms: u64) -> Result<Vec<u64>> {
        let t = self.topic(topic)?;
        let cfg = &t.config;
        let mut earliest = Vec::with_capacity(t.partitions.len());
        for p in &t.partitions {
            let mut log = p.write();
            let before = log.earliest;
            if let Some(limit) = cfg.retention_bytes {
                while log.bytes > limit && !log.records.is_empty() {
                    log.trim_front();
                }
            }
            if let Some(max_age) = cfg.retention_ms {
                while log
                    .records
                    .front()
                    .is_some_and(|r| now_ms.saturating_sub(r.event_time) > max_age)
                {
                    log.trim_front();
                }
            }
            if log.earliest != before {
                if let Some(segment) = &log.segment {
                    segment.write_earliest(log.earliest)?;
                }
            }
            earliest.push(log.earliest);
        }
        Ok(earliest)
    }

    /// Segment file paths of a persistent topic, for inspection tools.
    pub fn segment_paths(&self, topic: &str) -> Result<Vec<PathBuf>> {
        let t = self.topic(topic)?;
        Ok(t.partitions
            .iter()
            .filter_map(|p| p.read().segment.as_ref().map(|s| s.log_path().to_path_buf()))
            .collect())
    }
}
