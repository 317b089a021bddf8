//! Independent oracles shared by the integration and acceptance suites.

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use parking_lot::Mutex;
use pilotstream::broker::{Broker, BrokerError, Record, Target, TopicConfig};
use pilotstream::engine::{
    close_source, concat_partials, Engine, Operator, OperatorError, OperatorRegistry, OutputRecord, PartialResult,
    StreamDefinition, TaskContext, WindowBatch, WindowOutput, END_OF_STREAM_KEY,
};
use pilotstream::metrics::Metrics;
use pilotstream::pilot::WorkerPool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- broker

/// Reference FNV-1a, written out from the published constants.
pub fn fnv1a_ref(bytes: &[u8]) -> u64 {
    bytes.iter().fold(14_695_981_039_346_656_037u64, |h, &b| (h ^ b as u64).wrapping_mul(1_099_511_628_211))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowRecord {
    pub offset: u64,
    pub event_time: u64,
    pub key: Option<Vec<u8>>,
    pub payload: Vec<u8>,
}

impl ShadowRecord {
    fn matches(&self, r: &Record, partition: u32) -> bool {
        r.partition == partition
            && r.offset == self.offset
            && r.event_time == self.event_time
            && r.key.as_deref() == self.key.as_deref()
            && r.payload[..] == self.payload[..]
    }
}

#[derive(Debug, Clone, Default)]
struct ShadowPartition {
    earliest: u64,
    records: VecDeque<ShadowRecord>,
}

impl ShadowPartition {
    fn latest(&self) -> u64 {
        self.earliest + self.records.len() as u64
    }

    fn bytes(&self) -> u64 {
        self.records.iter().map(|r| r.payload.len() as u64).sum()
    }
}

/// Plain-list model of one topic plus consumer-group commits.
#[derive(Debug, Clone)]
pub struct ShadowBroker {
    parts: Vec<ShadowPartition>,
    round_robin: usize,
    retention_bytes: Option<u64>,
    retention_ms: Option<u64>,
    commits: BTreeMap<(String, u32), u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShadowError {
    OutOfRange,
    Ahead,
    Stale,
    Partition,
}

fn classify(e: &BrokerError) -> Option<ShadowError> {
    match e {
        BrokerError::OffsetOutOfRange { .. } => Some(ShadowError::OutOfRange),
        BrokerError::OffsetAhead { .. } => Some(ShadowError::Ahead),
        BrokerError::StaleCommit { .. } => Some(ShadowError::Stale),
        BrokerError::PartitionOutOfRange { .. } => Some(ShadowError::Partition),
        _ => None,
    }
}

impl ShadowBroker {
    pub fn new(partitions: u32, retention_bytes: Option<u64>, retention_ms: Option<u64>) -> Self {
        ShadowBroker {
            parts: vec![ShadowPartition::default(); partitions as usize],
            round_robin: 0,
            retention_bytes,
            retention_ms,
            commits: BTreeMap::new(),
        }
    }

    pub fn append(&mut self, target: &Target, payload: &[u8], event_time: u64) -> Result<(u32, u64), ShadowError> {
        let n = self.parts.len();
        let (p, key) = match target {
            Target::Partition(p) => (*p as usize, None),
            Target::Key(k) => ((fnv1a_ref(k) % n as u64) as usize, Some(k.to_vec())),
            Target::RoundRobin => {
                self.round_robin += 1;
                ((self.round_robin - 1) % n, None)
            }
        };
        let part = self.parts.get_mut(p).ok_or(ShadowError::Partition)?;
        let offset = part.latest();
        part.records.push_back(ShadowRecord { offset, event_time, key, payload: payload.to_vec() });
        Ok((p as u32, offset))
    }

    pub fn fetch(&self, p: u32, from: u64, max_bytes: usize) -> Result<Vec<ShadowRecord>, ShadowError> {
        let part = self.parts.get(p as usize).ok_or(ShadowError::Partition)?;
        if from < part.earliest || from > part.latest() {
            return Err(ShadowError::OutOfRange);
        }
        let mut out = Vec::new();
        let mut used = 0;
        for r in part.records.iter().skip((from - part.earliest) as usize) {
            if !out.is_empty() && used + r.payload.len() > max_bytes {
                break;
            }
            used += r.payload.len();
            out.push(r.clone());
        }
        Ok(out)
    }

    pub fn trim(&mut self, now_ms: u64) -> Vec<u64> {
        for part in &mut self.parts {
            if let Some(limit) = self.retention_bytes {
                while part.bytes() > limit && !part.records.is_empty() {
                    part.records.pop_front();
                    part.earliest += 1;
                }
            }
            if let Some(age) = self.retention_ms {
                while part.records.front().is_some_and(|r| now_ms.saturating_sub(r.event_time) > age) {
                    part.records.pop_front();
                    part.earliest += 1;
                }
            }
        }
        self.earliest()
    }

    pub fn commit(&mut self, group: &str, offsets: &BTreeMap<u32, u64>) -> Result<(), ShadowError> {
        for (&p, &o) in offsets {
            let part = self.parts.get(p as usize).ok_or(ShadowError::Partition)?;
            if o > part.latest() {
                return Err(ShadowError::Ahead);
            }
            if self.commits.get(&(group.to_string(), p)).is_some_and(|&c| o < c) {
                return Err(ShadowError::Stale);
            }
        }
        for (&p, &o) in offsets {
            self.commits.insert((group.to_string(), p), o);
        }
        Ok(())
    }

    pub fn committed(&self, group: &str) -> BTreeMap<u32, u64> {
        self.commits.iter().filter(|((g, _), _)| g == group).map(|((_, p), o)| (*p, *o)).collect()
    }

    pub fn earliest(&self) -> Vec<u64> {
        self.parts.iter().map(|p| p.earliest).collect()
    }

    pub fn latest(&self) -> Vec<u64> {
        self.parts.iter().map(ShadowPartition::latest).collect()
    }

    pub fn bytes(&self) -> Vec<u64> {
        self.parts.iter().map(ShadowPartition::bytes).collect()
    }

    /// State a freshly reopened broker starts from: logs survive, the
    /// round-robin cursor and group commits do not.
    pub fn reopened(&self) -> Self {
        ShadowBroker { round_robin: 0, commits: BTreeMap::new(), ..self.clone() }
    }
}

const TOPIC: &str = "shadow";
const GROUPS: [&str; 2] = ["g1", "g2"];

fn all_retained(b: &Broker, partitions: u32) -> Result<Vec<Vec<Record>>, String> {
    let earliest = b.earliest_offsets(TOPIC).map_err(|e| e.to_string())?;
    let latest = b.latest_offsets(TOPIC).map_err(|e| e.to_string())?;
    (0..partitions)
        .map(|p| b.fetch_range(TOPIC, p, earliest[p as usize], latest[p as usize]).map_err(|e| e.to_string()))
        .collect()
}

fn check_state(step: usize, b: &Broker, s: &ShadowBroker) -> Result<(), String> {
    let got = (
        b.earliest_offsets(TOPIC).unwrap(),
        b.latest_offsets(TOPIC).unwrap(),
        b.retained_bytes(TOPIC).unwrap(),
    );
    let want = (s.earliest(), s.latest(), s.bytes());
    if got != want {
        return Err(format!("op {step}: offsets/bytes {got:?} != shadow {want:?}"));
    }
    for g in GROUPS {
        let got = b.fetch_committed(g).for_topic(TOPIC);
        if got != s.committed(g) {
            return Err(format!("op {step}: group {g} committed {got:?} != shadow {:?}", s.committed(g)));
        }
    }
    Ok(())
}

/// Runs `ops` random append/fetch/trim/commit operations against a broker
/// and the shadow model. With `disk`, the broker is persistent and is
/// reopened mid-sequence and at the end; every retained record must read
/// back identically. Returns the number of records fetched and compared.
pub fn broker_sequence(seed: u64, ops: usize, disk: Option<&Path>) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partitions = rng.random_range(1..=5u32);
    let retention_bytes = rng.random_bool(0.5).then(|| rng.random_range(0..400u64));
    let retention_ms = rng.random_bool(0.5).then(|| rng.random_range(0..50u64));
    let mut cfg = TopicConfig::new(TOPIC, partitions);
    cfg.retention_bytes = retention_bytes;
    cfg.retention_ms = retention_ms;

    let open = || -> Result<Broker, String> {
        match disk {
            Some(dir) => Broker::open(dir).map_err(|e| e.to_string()),
            None => Ok(Broker::in_memory()),
        }
    };
    let mut broker = open()?;
    broker.create_topic(cfg).map_err(|e| e.to_string())?;
    let mut shadow = ShadowBroker::new(partitions, retention_bytes, retention_ms);
    let mut clock = 0u64;
    let mut compared = 0;
    let reopen_at = disk.map(|_| rng.random_range(0..ops.max(1)));

    for step in 0..ops {
        clock += rng.random_range(0..5);
        match rng.random_range(0..10) {
            0..=3 => {
                let len = rng.random_range(0..48);
                let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                let target = match rng.random_range(0..4) {
                    0 => Target::RoundRobin,
                    1 => Target::Key(Bytes::from(vec![rng.random::<u8>(); rng.random_range(0..6)])),
                    // one past the end exercises the partition check
                    _ => Target::Partition(rng.random_range(0..=partitions)),
                };
                let event_time = clock.saturating_sub(rng.random_range(0..20));
                let got = broker.append(TOPIC, target.clone(), payload.clone(), event_time);
                let want = shadow.append(&target, &payload, event_time);
                match (got, want) {
                    (Ok(a), Ok((p, o))) if a.partition == p && a.offset == o => {}
                    (Err(e), Err(w)) if classify(&e) == Some(w.clone()) => {}
                    (g, w) => return Err(format!("op {step}: append {g:?} != shadow {w:?}")),
                }
            }
            4..=6 => {
                let p = rng.random_range(0..partitions);
                let lo = shadow.earliest()[p as usize].saturating_sub(2);
                let hi = shadow.latest()[p as usize] + 2;
                let from = rng.random_range(lo..=hi);
                let max_bytes = rng.random_range(0..120);
                let got = broker.fetch(TOPIC, p, from, max_bytes);
                let want = shadow.fetch(p, from, max_bytes);
                match (got, want) {
                    (Ok(g), Ok(w)) => {
                        let same = g.records.len() == w.len()
                            && g.records.iter().zip(&w).all(|(r, s)| s.matches(r, p))
                            && g.next_offset == from + w.len() as u64;
                        if !same {
                            return Err(format!("op {step}: fetch {p}@{from} diverged"));
                        }
                        compared += w.len();
                    }
                    (Err(e), Err(w)) if classify(&e) == Some(w.clone()) => {}
                    (g, w) => return Err(format!("op {step}: fetch {g:?} != shadow {w:?}")),
                }
            }
            7 => {
                let got = broker.enforce_retention_at(TOPIC, clock).map_err(|e| e.to_string())?;
                let want = shadow.trim(clock);
                if got != want {
                    return Err(format!("op {step}: trim earliest {got:?} != shadow {want:?}"));
                }
            }
            _ => {
                let group = GROUPS[rng.random_range(0..GROUPS.len())];
                let mut offsets = BTreeMap::new();
                for _ in 0..rng.random_range(1..=3) {
                    let p = rng.random_range(0..=partitions);
                    let base = shadow.latest().get(p as usize).copied().unwrap_or(0);
                    offsets.insert(p, base.saturating_sub(rng.random_range(0..4)) + rng.random_range(0..2));
                }
                let got = broker.commit_offsets(group, TOPIC, &offsets);
                let want = shadow.commit(group, &offsets);
                match (got, want) {
                    (Ok(()), Ok(())) => {}
                    (Err(e), Err(w)) if classify(&e) == Some(w.clone()) => {}
                    (g, w) => return Err(format!("op {step}: commit {g:?} != shadow {w:?}")),
                }
            }
        }
        check_state(step, &broker, &shadow)?;
        if Some(step) == reopen_at {
            compared += reopen(&mut broker, &open, partitions)?;
            shadow = shadow.reopened();
            check_state(step, &broker, &shadow)?;
        }
    }
    if disk.is_some() {
        compared += reopen(&mut broker, &open, partitions)?;
        check_state(ops, &broker, &shadow.reopened())?;
    }
    Ok(compared)
}

fn reopen(broker: &mut Broker, open: &dyn Fn() -> Result<Broker, String>, partitions: u32) -> Result<usize, String> {
    let before = all_retained(broker, partitions)?;
    *broker = Broker::in_memory();
    let reopened = open()?;
    let after = all_retained(&reopened, partitions)?;
    if before != after {
        return Err("reopened broker returned different records".into());
    }
    *broker = reopened;
    Ok(before.iter().map(Vec::len).sum())
}

// ---------------------------------------------------------------- engine

/// Deterministic per-record transform used as the operator's output.
pub fn transform(payload: &[u8]) -> Bytes {
    let mut out: Vec<u8> = payload.iter().rev().map(|b| b.wrapping_mul(31).wrapping_add(7)).collect();
    out.extend_from_slice(&fnv1a_ref(payload).to_le_bytes());
    Bytes::from(out)
}

/// Maps every record through [`transform`]. Fails exactly once: the first
/// `process` (or `merge`) call of a window at or after `fail_from`.
pub struct FlakyOperator {
    pub fail_from: u64,
    pub in_merge: bool,
    pub tripped: AtomicBool,
    pub failed_window: Mutex<Option<u64>>,
}

impl FlakyOperator {
    pub fn new(fail_from: u64, in_merge: bool) -> Self {
        FlakyOperator { fail_from, in_merge, tripped: AtomicBool::new(false), failed_window: Mutex::new(None) }
    }

    fn trip(&self, window: u64) -> bool {
        if window >= self.fail_from && !self.tripped.swap(true, Ordering::SeqCst) {
            *self.failed_window.lock() = Some(window);
            return true;
        }
        false
    }
}

impl Operator for FlakyOperator {
    fn name(&self) -> &str {
        "flaky"
    }

    fn process(&self, task: &TaskContext, records: &[Record]) -> Result<PartialResult, OperatorError> {
        if !self.in_merge && self.trip(task.window_index) {
            return Err(OperatorError::on_partition(task.partition, "injected"));
        }
        Ok(PartialResult {
            partition: task.partition,
            outputs: records
                .iter()
                .map(|r| OutputRecord { partition: r.partition, offset: r.offset, data: transform(&r.payload) })
                .collect(),
            ..Default::default()
        })
    }

    fn merge(&self, window_index: u64, partials: Vec<PartialResult>) -> Result<WindowOutput, OperatorError> {
        if self.in_merge && self.trip(window_index) {
            return Err(OperatorError::new("injected merge failure"));
        }
        Ok(concat_partials(window_index, partials))
    }
}

#[derive(Debug, Clone)]
pub struct EngineRun {
    pub workers: usize,
    pub partitions: u32,
    pub records: u64,
    pub windows: usize,
    pub threaded: bool,
    pub retried_window: Option<u64>,
}

/// One randomized engine run with a single injected failure. Checks the
/// output multiset against a single-threaded pass over the topic, window
/// contiguity, offset conservation and that exactly one window was retried.
pub fn engine_run(seed: u64, workers: usize) -> Result<EngineRun, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partitions = rng.random_range(1..=12u32);
    let total = rng.random_range(20..300u64);
    let threaded = rng.random_bool(0.5);
    let in_merge = rng.random_bool(0.3);
    let fail_from = rng.random_range(0..3u64);

    let broker = Broker::in_memory();
    broker.create_topic(TopicConfig::new("t", partitions)).map_err(|e| e.to_string())?;
    let pool = WorkerPool::new("engine-test");
    pool.spawn_workers("engine-test", workers).map_err(|e| e.to_string())?;
    let engine = Engine::new(pool.clone(), OperatorRegistry::new(), Metrics::new());
    let mut def = StreamDefinition::new("t", "g", Duration::from_millis(rng.random_range(2..15)), "flaky");
    def.max_records_per_window = rng.random_bool(0.5).then(|| rng.random_range(1..20));
    let op = Arc::new(FlakyOperator::new(fail_from, in_merge));
    let stream = engine.define_stream_with(&broker, def, op.clone()).map_err(|e| e.to_string())?;

    let produce = |rng: &mut ChaCha8Rng, n: u64| {
        for _ in 0..n {
            let len = rng.random_range(0..32);
            let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let target = if rng.random_bool(0.5) {
                Target::RoundRobin
            } else {
                Target::Partition(rng.random_range(0..partitions))
            };
            broker.append("t", target, payload, 0).expect("append");
        }
    };

    let outputs: Arc<Mutex<Vec<OutputRecord>>> = Arc::default();
    if threaded {
        let sink = outputs.clone();
        let handle = stream.run_with_observer(move |r| sink.lock().extend(r.output.outputs.iter().cloned()));
        let mut sent = 0;
        while sent < total {
            let n = rng.random_range(1..=20).min(total - sent);
            produce(&mut rng, n);
            sent += n;
            std::thread::sleep(Duration::from_micros(rng.random_range(0..3000)));
        }
        close_source(&broker, "t").map_err(|e| e.to_string())?;
        let deadline = std::time::Instant::now() + Duration::from_secs(30);
        while !handle.is_finished() && std::time::Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(2));
        }
        handle.stop_and_join().map_err(|e| format!("run failed: {e}"))?;
    } else {
        let mut sent = 0;
        loop {
            if sent < total {
                let n = rng.random_range(1..=40).min(total - sent);
                produce(&mut rng, n);
                sent += n;
            }
            let r = stream.step().map_err(|e| e.to_string())?;
            outputs.lock().extend(r.output.outputs);
            if sent == total && r.batch.record_count == 0 {
                break;
            }
        }
    }
    pool.shutdown();

    let mut oracle = Vec::new();
    let latest = broker.latest_offsets("t").unwrap();
    for p in 0..partitions {
        for r in broker.fetch_range("t", p, 0, latest[p as usize]).unwrap() {
            if r.key.as_deref() != Some(END_OF_STREAM_KEY) {
                oracle.push(OutputRecord { partition: p, offset: r.offset, data: transform(&r.payload) });
            }
        }
    }
    let mut got = std::mem::take(&mut *outputs.lock());
    got.sort();
    oracle.sort();
    if got != oracle {
        return Err(format!("output multiset differs: {} records vs oracle {}", got.len(), oracle.len()));
    }

    let ledger = stream.ledger();
    ledger_contiguous(&ledger, &vec![0; partitions as usize], Some(&latest))?;
    let counted: u64 = ledger.iter().map(|w| w.record_count).sum();
    if counted != latest.iter().sum::<u64>() {
        return Err(format!("ledger counts {counted} records, log holds {}", latest.iter().sum::<u64>()));
    }
    let committed = broker.fetch_committed("g").for_topic("t");
    if (0..partitions).any(|p| committed.get(&p).copied().unwrap_or(0) != latest[p as usize]) {
        return Err(format!("committed {committed:?} != latest {latest:?}"));
    }
    let retried: Vec<u64> = ledger.iter().filter(|w| w.attempts > 1).map(|w| w.window_index).collect();
    let failed = *op.failed_window.lock();
    if retried != failed.into_iter().collect::<Vec<_>>() {
        return Err(format!("retried windows {retried:?}, injected failure in {failed:?}"));
    }
    Ok(EngineRun { workers, partitions, records: total, windows: ledger.len(), threaded, retried_window: failed })
}

/// Window indices are 0, 1, 2, ... and every partition's ranges chain from
/// `initial` without gaps or overlaps, ending at `end` when given.
pub fn ledger_contiguous(ledger: &[WindowBatch], initial: &[u64], end: Option<&[u64]>) -> Result<(), String> {
    for (k, w) in ledger.iter().enumerate() {
        if w.window_index != k as u64 {
            return Err(format!("ledger gap: position {k} holds window {}", w.window_index));
        }
    }
    for (p, &start) in initial.iter().enumerate() {
        let p32 = p as u32;
        let mut next = start;
        for w in ledger {
            let r = w.ranges.get(&p32).ok_or_else(|| format!("window {} lacks partition {p}", w.window_index))?;
            if r.start != next || r.end < r.start {
                return Err(format!("partition {p}: window {} covers {r:?}, expected start {next}", w.window_index));
            }
            next = r.end;
        }
        if let Some(end) = end {
            if next != end[p] {
                return Err(format!("partition {p}: ledger ends at {next}, log at {}", end[p]));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- k-means

/// Brute-force nearest centroid, first index on ties.
pub fn brute_force_score(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut assignments = Vec::new();
    let mut cost = 0.0;
    for p in points {
        let d: Vec<f64> = centroids.iter().map(|c| c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        let best = (0..d.len()).fold(0, |b, j| if d[j] < d[b] { j } else { b });
        assignments.push(best);
        cost += d[best];
    }
    (assignments, cost)
}

/// Random points and centroids (with deliberate duplicates for ties);
/// checks [`kmeans_score`] against [`brute_force_score`] exactly.
pub fn kmeans_score_matches_oracle(seed: u64) -> Result<(), String> {
    use pilotstream::masa::{kmeans_score, KMeansModel, PointBatch};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=5);
    let k = rng.random_range(1..=8);
    let n = rng.random_range(0..200);
    let mut centroids: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    if k > 1 && rng.random_bool(0.5) {
        centroids[k - 1] = centroids[0].clone();
    }
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                centroids[rng.random_range(0..k)].clone()
            } else {
                (0..d).map(|_| rng.random_range(-8.0..8.0)).collect()
            }
        })
        .collect();
    let model = KMeansModel::new(centroids.clone(), 1.0).map_err(|e| e.to_string())?;
    let batch = PointBatch::new(d, points.concat()).map_err(|e| e.to_string())?;
    let got = kmeans_score(&model, &batch).map_err(|e| e.to_string())?;
    let (assign, cost) = brute_force_score(&points, &centroids);
    if got.assignments != assign || got.cost != cost {
        return Err(format!("seed {seed}: cost {} vs oracle {cost}", got.cost));
    }
    Ok(())
}

/// Feeds batches to a decay-1 model and returns the largest gap between a
/// centroid and the plain mean of every point ever assigned to it.
pub fn alpha_one_gap(seed: u64) -> Result<f64, String> {
    use pilotstream::masa::{kmeans_score, kmeans_update, KMeansModel, PointBatch};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (rng.random_range(1..=6), rng.random_range(1..=4));
    let initial: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
    let mut model = KMeansModel::new(initial.clone(), 1.0).map_err(|e| e.to_string())?;
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for _ in 0..rng.random_range(1..8) {
        let n = rng.random_range(0..100);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let batch = PointBatch::new(d, data).map_err(|e| e.to_string())?;
        let scores = kmeans_score(&model, &batch).map_err(|e| e.to_string())?;
        for (p, &j) in batch.rows().zip(&scores.assignments) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        model = kmeans_update(&model, &batch, &scores.assignments).map_err(|e| e.to_string())?;
    }
    let mut gap: f64 = 0.0;
    for j in 0..k {
        for t in 0..d {
            let want = if counts[j] == 0 { initial[j][t] } else { sums[j][t] / counts[j] as f64 };
            gap = gap.max((model.centroid(j)[t] - want).abs());
        }
    }
    Ok(gap)
}

/// Runs one window of `messages` `(partition, offset, payload)` through the
/// operator's process and merge phases.
pub fn operator_window(
    op: &dyn Operator,
    window_index: u64,
    messages: &[(u32, u64, Bytes)],
) -> Result<WindowOutput, OperatorError> {
    let mut by_partition: BTreeMap<u32, Vec<Record>> = BTreeMap::new();
    for (p, o, payload) in messages {
        by_partition.entry(*p).or_default().push(Record {
            topic: Arc::from("t"),
            partition: *p,
            offset: *o,
            event_time: 0,
            key: None,
            payload: payload.clone(),
        });
    }
    let mut partials = Vec::new();
    for (p, records) in by_partition {
        let task = TaskContext { window_index, partition: p, attempt: 0, worker: pilotstream::pilot::WorkerId(0) };
        partials.push(op.process(&task, &records)?);
    }
    op.merge(window_index, partials)
}

/// The same windows of cluster messages spread over two different partition
/// layouts; returns the largest centroid difference after every window,
/// starting from an unseeded operator.
pub fn partition_invariance_gap(seed: u64) -> Result<f64, String> {
    use pilotstream::masa::KMeansOperator;
    use pilotstream::mass::{generate_cluster_message, ClusterSourceConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = ClusterSourceConfig::new(rng.random_range(2..6), rng.random_range(10..60), rng.random_range(1..4), seed);
    let truth = source.centroids();
    let mut gen = source.rng_for(0);
    let k = rng.random_range(1..6);
    let decay = rng.random_range(0.0..=1.0);
    let a = KMeansOperator::new(k, decay, seed).map_err(|e| e.to_string())?;
    let b = KMeansOperator::new(k, decay, seed).map_err(|e| e.to_string())?;
    let (pa, pb) = (rng.random_range(1..=12u32), rng.random_range(1..=12u32));
    let mut gap: f64 = 0.0;
    let mut offset = 0;
    for w in 0..4 {
        let msgs: Vec<Bytes> =
            (0..rng.random_range(1..8)).map(|_| Bytes::from(generate_cluster_message(&source, &truth, &mut gen))).collect();
        let mut layout = |parts: u32| -> Vec<(u32, u64, Bytes)> {
            msgs.iter().enumerate().map(|(i, m)| (rng.random_range(0..parts), offset + i as u64, m.clone())).collect()
        };
        let (la, lb) = (layout(pa), layout(pb));
        offset += msgs.len() as u64;
        operator_window(&a, w, &la).map_err(|e| e.to_string())?;
        operator_window(&b, w, &lb).map_err(|e| e.to_string())?;
        let (ma, mb) = (a.model().ok_or("unseeded")?, b.model().ok_or("unseeded")?);
        for j in 0..ma.k() {
            for (x, y) in ma.centroid(j).iter().zip(mb.centroid(j)) {
                gap = gap.max((x - y).abs());
            }
        }
    }
    Ok(gap)
}

/// Smallest pairwise distance between the generator's true centroids.
pub fn min_separation(centroids: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in centroids.iter().enumerate() {
        for b in &centroids[i + 1..] {
            best = best.min(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    best
}

/// Three 2-D clusters (spread 10, stddev 0.5), five windows of `per_window`
/// messages through the k = 3 operator. Returns the largest distance from a
/// true centroid to its nearest model centroid and the true separation.
pub fn kmeans_convergence(seed: u64, per_window: usize) -> Result<(f64, f64), String> {
    use pilotstream::masa::KMeansOperator;
    use pilotstream::mass::{generate_cluster_message, ClusterSourceConfig};
    let mut source = ClusterSourceConfig::new(3, 200, 2, seed);
    source.centroid_spread = 10.0;
    source.point_stddev = 0.5;
    let truth = source.centroids();
    let mut gen = source.rng_for(0);
    let op = KMeansOperator::new(3, 1.0, seed).map_err(|e| e.to_string())?;
    let mut offset = 0;
    for w in 0..5 {
        let msgs: Vec<(u32, u64, Bytes)> = (0..per_window)
            .map(|i| ((i % 4) as u32, offset + i as u64, Bytes::from(generate_cluster_message(&source, &truth, &mut gen))))
            .collect();
        offset += per_window as u64;
        operator_window(&op, w, &msgs).map_err(|e| e.to_string())?;
    }
    let model = op.model().ok_or("unseeded")?;
    let worst = truth
        .iter()
        .map(|t| {
            (0..model.k())
                .map(|j| model.centroid(j).iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    Ok((worst, min_separation(&truth)))
}

// ---------------------------------------------------------- reconstruction

#[derive(Debug, Clone, Copy)]
pub struct MlemTrace {
    /// Largest `(LL[k-1] - LL[k]) / |LL[k-1]|` over the run, 0 if none.
    pub worst_relative_decrease: f64,
    pub min_pixel: f64,
    pub first_ll: f64,
    pub last_ll: f64,
}

/// Poisson log-likelihood after every ML-EM iteration on a noiseless
/// Shepp-Logan scan, starting from the all-ones image.
pub fn mlem_trace(n: usize, angles: usize, iterations: usize) -> MlemTrace {
    use pilotstream::masa::*;
    let bins = default_detector_bins(n);
    let theta = uniform_angles(angles);
    let sino = radon_forward(&shepp_logan(n), &theta, bins).unwrap();
    let ll = |img: &ImageGrid| poisson_log_likelihood(&sino, &radon_forward(img, &theta, bins).unwrap());
    let mut lls = vec![ll(&ImageGrid::filled(n, 1.0))];
    let mut min_pixel = f64::INFINITY;
    mlem_traced(&sino, n, iterations, None, |_, img| {
        lls.push(ll(img));
        min_pixel = min_pixel.min(img.pixels().iter().copied().fold(f64::INFINITY, f64::min));
    })
    .unwrap();
    let worst = lls.windows(2).map(|w| (w[0] - w[1]) / w[0].abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
    MlemTrace { worst_relative_decrease: worst, min_pixel, first_ll: lls[0], last_ll: *lls.last().unwrap() }
}

/// Full-image RMSE of gridrec against the phantom it was simulated from.
pub fn gridrec_rmse(n: usize, angles: usize) -> f64 {
    use pilotstream::masa::*;
    let phantom = shepp_logan(n);
    let sino = radon_forward(&phantom, &uniform_angles(angles), default_detector_bins(n)).unwrap();
    rmse(&gridrec(&sino, n).unwrap().image, &phantom, false).unwrap()
}

// ------------------------------------------------------------------ rates

/// Messages per second in each complete `window_s` window of a run.
pub fn windowed_rates(send_times_ms: &[f64], elapsed_s: f64, window_s: f64) -> Vec<f64> {
    let windows = (elapsed_s / window_s).floor() as usize;
    let mut counts = vec![0usize; windows];
    for &t in send_times_ms {
        let w = (t / 1e3 / window_s) as usize;
        if w < windows {
            counts[w] += 1;
        }
    }
    counts.into_iter().map(|c| c as f64 / window_s).collect()
}

/// Messages per second from the mean inter-arrival time of the whole run.
pub fn inter_arrival_rate(send_times_ms: &[f64]) -> Option<f64> {
    let (first, last) = (send_times_ms.first()?, send_times_ms.last()?);
    (send_times_ms.len() > 1 && last > first).then(|| (send_times_ms.len() - 1) as f64 / ((last - first) / 1e3))
}
