//! Micro-batch stream processing.
//!
//! A stream reads one broker topic in processing-time windows. Each window
//! snapshots the partition high-water marks, fixes one offset range per
//! partition, runs one task per non-empty range on the pilot's workers,
//! merges the partial results, and only then commits the range ends to the
//! consumer group. Because ranges are fixed before execution, a retried or
//! resumed window sees exactly the same records.

mod operator;

pub use operator::{
    concat_partials, IdentityOperator, Operator, OperatorConfig, OperatorError, OperatorFactory,
    OperatorRegistry, OutputRecord, PartialResult, SleepOperator, TaskContext, Timing, WindowOutput,
};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError, Record};
use crate::clock;
use crate::metrics::{AssignmentRow, Metrics, ReconRow, WindowRow};
use crate::pilot::{WorkerId, WorkerPool};

/// Records carrying this key mark the end of the source on their partition.
/// They are never passed to operators.
pub const END_OF_STREAM_KEY: &[u8] = b"__end_of_stream__";

pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("invalid stream definition: {0}")]
    InvalidDefinition(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("window {window_index} failed after {attempts} attempts: {last_error}")]
    RetriesExhausted { window_index: u64, attempts: u32, last_error: String },
    #[error("batch for window {window_index} no longer matches the stream position")]
    StaleBatch { window_index: u64 },
    #[error("engine pool has no workers")]
    NoWorkers,
    #[error("stream has failed")]
    StreamFailed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartPosition {
    #[default]
    Earliest,
    Latest,
}

fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDefinition {
    pub topic: String,
    pub group: String,
    pub window_ms: u64,
    pub operator: String,
    #[serde(default)]
    pub operator_config: OperatorConfig,
    /// Per-partition cap on records per window.
    #[serde(default)]
    pub max_records_per_window: Option<u64>,
    /// Where to start partitions the group has never committed.
    #[serde(default)]
    pub start: StartPosition,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

impl StreamDefinition {
    pub fn new(topic: &str, group: &str, window: Duration, operator: &str) -> Self {
        StreamDefinition {
            topic: topic.to_string(),
            group: group.to_string(),
            window_ms: window.as_millis() as u64,
            operator: operator.to_string(),
            operator_config: OperatorConfig::new(),
            max_records_per_window: None,
            start: StartPosition::Earliest,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OffsetRange {
    pub start: u64,
    pub end: u64,
}

impl OffsetRange {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// One planned (and, once committed, completed) window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowBatch {
    pub window_index: u64,
    /// Epoch ms.
    pub planned_at: u64,
    pub completed_at: Option<u64>,
    pub ranges: BTreeMap<u32, OffsetRange>,
    pub record_count: u64,
    pub byte_count: u64,
    /// Records left behind by this plan (high-water mark minus range end).
    pub backlog: u64,
    pub scheduling_delay_ms: u64,
    pub processing_ms: f64,
    pub attempts: u32,
}

impl WindowBatch {
    pub fn is_empty(&self) -> bool {
        self.record_count == 0
    }

    /// Records per second of processing time.
    pub fn throughput(&self) -> f64 {
        if self.processing_ms > 0.0 {
            self.record_count as f64 / (self.processing_ms / 1e3)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackpressureStats {
    pub window_index: u64,
    pub scheduling_delay_ms: u64,
    pub processing_ms: f64,
    pub backlog_records: u64,
}

/// Partition → worker mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub workers: Vec<WorkerId>,
    pub by_partition: Vec<WorkerId>,
}

impl Assignment {
    /// Partition count per worker, in `workers` order.
    pub fn loads(&self) -> Vec<usize> {
        self.workers.iter().map(|w| self.by_partition.iter().filter(|p| *p == w).count()).collect()
    }

    pub fn partitions_of(&self, worker: WorkerId) -> Vec<u32> {
        self.by_partition.iter().enumerate().filter(|(_, w)| **w == worker).map(|(p, _)| p as u32).collect()
    }
}

/// Round-robin placement: partition `p` goes to `workers[p % n]`, so loads
/// differ by at most one partition.
pub fn rebalance(partitions: u32, workers: &[WorkerId]) -> Assignment {
    let by_partition = if workers.is_empty() {
        Vec::new()
    } else {
        (0..partitions as usize).map(|p| workers[p % workers.len()]).collect()
    };
    Assignment { workers: workers.to_vec(), by_partition }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamStatus {
    Idle,
    Running,
    Stopped,
    Failed,
}

/// Micro-batch engine bound to a pilot's worker pool.
#[derive(Clone)]
pub struct Engine {
    pool: WorkerPool,
    operators: OperatorRegistry,
    metrics: Metrics,
}

impl Engine {
    pub fn new(pool: WorkerPool, operators: OperatorRegistry, metrics: Metrics) -> Self {
        Engine { pool, operators, metrics }
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn operators(&self) -> &OperatorRegistry {
        &self.operators
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    /// Defines a stream whose operator is built from the registry.
    pub fn define_stream(&self, broker: &Broker, def: StreamDefinition) -> Result<Stream, EngineError> {
        broker.topic_config(&def.topic).map_err(|_| EngineError::UnknownTopic(def.topic.clone()))?;
        let operator = self
            .operators
            .build(&def.operator, &def.operator_config)
            .ok_or_else(|| EngineError::UnknownOperator(def.operator.clone()))??;
        self.define_stream_with(broker, def, operator)
    }

    /// Defines a stream around an operator instance supplied by the caller.
    pub fn define_stream_with(
        &self,
        broker: &Broker,
        def: StreamDefinition,
        operator: Arc<dyn Operator>,
    ) -> Result<Stream, EngineError> {
        if def.window_ms == 0 {
            return Err(EngineError::InvalidDefinition("window_ms must be > 0".into()));
        }
        if def.max_records_per_window == Some(0) {
            return Err(EngineError::InvalidDefinition("max_records_per_window must be > 0".into()));
        }
        let config = broker.topic_config(&def.topic).map_err(|_| EngineError::UnknownTopic(def.topic.clone()))?;
        let committed = broker.fetch_committed(&def.group).for_topic(&def.topic);
        let earliest = broker.earliest_offsets(&def.topic)?;
        let latest = broker.latest_offsets(&def.topic)?;
        let initial: Vec<u64> = (0..config.partitions)
            .map(|p| {
                committed.get(&p).copied().unwrap_or(match def.start {
                    StartPosition::Earliest => earliest[p as usize],
                    StartPosition::Latest => latest[p as usize],
                })
            })
            .collect();
        let component = format!("engine:{}", def.group);
        self.metrics.register(&component);
        let resized = Arc::new(AtomicBool::new(true));
        let flag = resized.clone();
        self.pool.on_resize(Arc::new(move |_| flag.store(true, Ordering::SeqCst)));
        let inner = StreamInner {
            def,
            broker: broker.clone(),
            operator,
            pool: self.pool.clone(),
            metrics: self.metrics.clone(),
            component,
            partitions: config.partitions,
            initial: initial.clone(),
            state: Mutex::new(StreamState {
                committed: initial,
                next_window: 0,
                status: StreamStatus::Idle,
                assignment: Assignment { workers: Vec::new(), by_partition: Vec::new() },
                ended: vec![false; config.partitions as usize],
                skipped: 0,
            }),
            exec_lock: Mutex::new(()),
            ledger: Mutex::new(Vec::new()),
            resized,
            stop: Mutex::new(false),
            stop_cv: Condvar::new(),
        };
        Ok(Stream { inner: Arc::new(inner) })
    }
}

struct StreamState {
    committed: Vec<u64>,
    next_window: u64,
    status: StreamStatus,
    assignment: Assignment,
    ended: Vec<bool>,
    skipped: usize,
}

struct StreamInner {
    def: StreamDefinition,
    broker: Broker,
    operator: Arc<dyn Operator>,
    pool: WorkerPool,
    metrics: Metrics,
    component: String,
    partitions: u32,
    initial: Vec<u64>,
    state: Mutex<StreamState>,
    exec_lock: Mutex<()>,
    ledger: Mutex<Vec<WindowBatch>>,
    resized: Arc<AtomicBool>,
    stop: Mutex<bool>,
    stop_cv: Condvar,
}

struct TaskOutput {
    partition: u32,
    partial: PartialResult,
    bytes: u64,
    event_times: Vec<u64>,
    saw_end: bool,
}

/// Result of one executed window.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub batch: WindowBatch,
    pub output: WindowOutput,
}

#[derive(Clone)]
pub struct Stream {
    inner: Arc<StreamInner>,
}

impl std::fmt::Debug for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stream")
            .field("topic", &self.inner.def.topic)
            .field("group", &self.inner.def.group)
            .field("status", &self.status())
            .finish()
    }
}

impl Stream {
    pub fn definition(&self) -> &StreamDefinition {
        &self.inner.def
    }

    pub fn operator(&self) -> &Arc<dyn Operator> {
        &self.inner.operator
    }

    pub fn status(&self) -> StreamStatus {
        self.inner.state.lock().status
    }

    pub fn committed(&self) -> Vec<u64> {
        self.inner.state.lock().committed.clone()
    }

    pub fn initial_offsets(&self) -> &[u64] {
        &self.inner.initial
    }

    pub fn assignment(&self) -> Assignment {
        self.inner.state.lock().assignment.clone()
    }

    /// Completed windows in commit order.
    pub fn ledger(&self) -> Vec<WindowBatch> {
        self.inner.ledger.lock().clone()
    }

    pub fn backpressure(&self) -> Vec<BackpressureStats> {
        self.inner
            .ledger
            .lock()
            .iter()
            .map(|b| BackpressureStats {
                window_index: b.window_index,
                scheduling_delay_ms: b.scheduling_delay_ms,
                processing_ms: b.processing_ms,
                backlog_records: b.backlog,
            })
            .collect()
    }

    /// Malformed messages dropped by the operator across committed windows.
    pub fn skipped_total(&self) -> usize {
        self.inner.state.lock().skipped
    }

    /// True once every partition has delivered an end-of-stream marker.
    pub fn source_ended(&self) -> bool {
        self.inner.state.lock().ended.iter().all(|e| *e)
    }

    /// Recomputes the partition → worker mapping over the pool's current
    /// workers and records it.
    pub fn rebalance(&self) -> Assignment {
        let workers = self.inner.pool.worker_ids();
        let assignment = rebalance(self.inner.partitions, &workers);
        let mut st = self.inner.state.lock();
        let window_index = st.next_window;
        st.assignment = assignment.clone();
        drop(st);
        let now = clock::now_ms();
        for (p, w) in assignment.by_partition.iter().enumerate() {
            let worker = workers.iter().position(|x| x == w).unwrap_or(0);
            self.inner.metrics.record_assignment(AssignmentRow {
                at_ms: now,
                window_index,
                workers: workers.len(),
                partition: p as u32,
                worker,
            });
        }
        log::debug!("stream {} rebalanced over {} workers: {:?}", self.inner.def.group, workers.len(), assignment.loads());
        assignment
    }

    /// Plans the next window from the committed position and the current
    /// high-water marks. Planning twice without executing yields the same
    /// window index and ranges (plus any newly arrived records).
    pub fn plan_batch(&self) -> Result<WindowBatch, EngineError> {
        let latest = self.inner.broker.latest_offsets(&self.inner.def.topic)?;
        let st = self.inner.state.lock();
        let cap = self.inner.def.max_records_per_window;
        let mut ranges = BTreeMap::new();
        let mut record_count = 0;
        let mut backlog = 0;
        for (p, &start) in st.committed.iter().enumerate() {
            let hw = latest[p].max(start);
            let end = match cap {
                Some(cap) => hw.min(start + cap),
                None => hw,
            };
            record_count += end - start;
            backlog += hw - end;
            ranges.insert(p as u32, OffsetRange { start, end });
        }
        Ok(WindowBatch {
            window_index: st.next_window,
            planned_at: clock::now_ms(),
            completed_at: None,
            ranges,
            record_count,
            byte_count: 0,
            backlog,
            scheduling_delay_ms: 0,
            processing_ms: 0.0,
            attempts: 0,
        })
    }

    fn run_attempt(
        &self,
        batch: &WindowBatch,
        assignment: &Assignment,
        attempt: u32,
    ) -> Result<(WindowOutput, Vec<TaskOutput>), OperatorError> {
        let (tx, rx) = crossbeam_channel::unbounded();
        let mut submitted = 0;
        for (&partition, range) in batch.ranges.iter().filter(|(_, r)| !r.is_empty()) {
            let worker = assignment.by_partition[partition as usize];
            let task = TaskContext { window_index: batch.window_index, partition, attempt, worker };
            let broker = self.inner.broker.clone();
            let topic = self.inner.def.topic.clone();
            let operator = self.inner.operator.clone();
            let range = *range;
            let tx = tx.clone();
            self.inner.pool.execute_on(
                worker,
                Box::new(move || {
                    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                        run_task(&broker, &topic, &task, range, operator.as_ref())
                    }))
                    .unwrap_or_else(|_| Err(OperatorError::on_partition(partition, "task panicked")));
                    let _ = tx.send(result);
                }),
            );
            submitted += 1;
        }
        drop(tx);
        let mut outputs = Vec::with_capacity(submitted);
        let mut first_error = None;
        for _ in 0..submitted {
            match rx.recv() {
                Ok(Ok(out)) => outputs.push(out),
                Ok(Err(e)) => {
                    first_error.get_or_insert(e);
                }
                Err(_) => {
                    first_error.get_or_insert(OperatorError::new("worker dropped a task"));
                    break;
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        outputs.sort_by_key(|o| o.partition);
        let mut tasks = Vec::with_capacity(outputs.len());
        let mut partials = Vec::with_capacity(outputs.len());
        for mut o in outputs {
            partials.push(std::mem::take(&mut o.partial));
            tasks.push(o);
        }
        let merged = self.inner.operator.merge(batch.window_index, partials)?;
        Ok((merged, tasks))
    }

    /// Executes a planned window: one task per non-empty range, merge, then
    /// commit. Failed attempts are retried whole; offsets advance only on
    /// success.
    pub fn execute_batch(&self, mut batch: WindowBatch) -> Result<BatchResult, EngineError> {
        let _exclusive = self.inner.exec_lock.lock();
        {
            let st = self.inner.state.lock();
            if st.status == StreamStatus::Failed {
                return Err(EngineError::StreamFailed);
            }
            let matches = batch.window_index == st.next_window
                && batch.ranges.len() == st.committed.len()
                && batch.ranges.iter().all(|(p, r)| st.committed[*p as usize] == r.start);
            if !matches {
                return Err(EngineError::StaleBatch { window_index: batch.window_index });
            }
        }
        let started = Instant::now();
        let mut output = WindowOutput { window_index: batch.window_index, ..Default::default() };
        let mut tasks = Vec::new();
        if !batch.is_empty() {
            if self.inner.pool.is_empty() {
                return Err(EngineError::NoWorkers);
            }
            if self.inner.resized.swap(false, Ordering::SeqCst) || self.assignment().workers.is_empty() {
                self.rebalance();
            }
            let assignment = self.assignment();
            let max_attempts = self.inner.def.max_retries + 1;
            let mut last_error = None;
            for attempt in 0..max_attempts {
                batch.attempts = attempt + 1;
                match self.run_attempt(&batch, &assignment, attempt) {
                    Ok((merged, t)) => {
                        output = merged;
                        tasks = t;
                        last_error = None;
                        break;
                    }
                    Err(e) => {
                        log::warn!("window {} attempt {} failed: {e}", batch.window_index, attempt + 1);
                        last_error = Some(e);
                    }
                }
            }
            if let Some(e) = last_error {
                self.inner.state.lock().status = StreamStatus::Failed;
                return Err(EngineError::RetriesExhausted {
                    window_index: batch.window_index,
                    attempts: max_attempts,
                    last_error: e.to_string(),
                });
            }
        } else {
            batch.attempts = 0;
        }

        let ends: BTreeMap<u32, u64> = batch.ranges.iter().map(|(p, r)| (*p, r.end)).collect();
        if !batch.is_empty() {
            self.inner.broker.commit_offsets(&self.inner.def.group, &self.inner.def.topic, &ends)?;
        }
        let completed_at = clock::now_ms();
        batch.processing_ms = started.elapsed().as_secs_f64() * 1e3;
        batch.completed_at = Some(completed_at);
        batch.byte_count = tasks.iter().map(|t| t.bytes).sum();
        {
            let mut st = self.inner.state.lock();
            for (p, end) in &ends {
                st.committed[*p as usize] = *end;
            }
            for t in &tasks {
                if t.saw_end {
                    st.ended[t.partition as usize] = true;
                }
            }
            st.skipped += output.skipped;
            st.next_window += 1;
        }
        self.inner.ledger.lock().push(batch.clone());

        let m = &self.inner.metrics;
        m.record_window(WindowRow {
            window_index: batch.window_index,
            planned_at_ms: batch.planned_at,
            records: batch.record_count,
            bytes: batch.byte_count,
            processing_ms: batch.processing_ms,
            scheduling_delay_ms: batch.scheduling_delay_ms,
            backlog_records: batch.backlog,
        });
        let data_records: u64 = tasks.iter().map(|t| t.event_times.len() as u64).sum();
        let _ = m.record_messages(&self.inner.component, data_records, batch.byte_count);
        let _ = m.record_latencies(
            &self.inner.component,
            completed_at,
            tasks.iter().flat_map(|t| t.event_times.iter().copied()),
        );
        for t in &output.timings {
            m.record_reconstruction(ReconRow {
                window_index: batch.window_index,
                message_offset: t.offset,
                algorithm: t.algorithm.clone(),
                iterations: t.iterations,
                millis: t.millis,
                rmse: t.rmse,
            });
        }
        Ok(BatchResult { batch, output })
    }

    /// Plans and executes one window immediately.
    pub fn step(&self) -> Result<BatchResult, EngineError> {
        let batch = self.plan_batch()?;
        self.execute_batch(batch)
    }

    /// Asks a running loop to stop after its current window.
    pub fn stop(&self) {
        *self.inner.stop.lock() = true;
        self.inner.stop_cv.notify_all();
    }

    fn stop_requested(&self) -> bool {
        *self.inner.stop.lock()
    }

    /// Sleeps until `deadline` or a stop request; true if stopped.
    fn sleep_until(&self, deadline: Instant) -> bool {
        let mut stop = self.inner.stop.lock();
        while !*stop {
            if self.inner.stop_cv.wait_until(&mut stop, deadline).timed_out() {
                return *stop;
            }
        }
        true
    }

    /// Starts the windowing loop on its own thread. Window `k` is nominally
    /// due at `start + (k+1) * window`; a window that overruns is followed
    /// immediately by the next one, which picks up the accumulated backlog.
    pub fn run(&self) -> RunHandle {
        self.run_with_observer(|_| {})
    }

    /// Like [`run`](Self::run), calling `observer` after every window.
    pub fn run_with_observer<F>(&self, mut observer: F) -> RunHandle
    where
        F: FnMut(&BatchResult) + Send + 'static,
    {
        *self.inner.stop.lock() = false;
        self.inner.state.lock().status = StreamStatus::Running;
        let stream = self.clone();
        let handle = std::thread::Builder::new()
            .name(format!("stream-{}", self.inner.def.group))
            .spawn(move || {
                let window = Duration::from_millis(stream.inner.def.window_ms);
                let start = Instant::now();
                let mut k: u32 = 0;
                let mut windows = 0u64;
                let result = loop {
                    let nominal = start + window * (k + 1);
                    if Instant::now() < nominal && stream.sleep_until(nominal) {
                        break Ok(windows);
                    }
                    if stream.stop_requested() {
                        break Ok(windows);
                    }
                    let delay = Instant::now().saturating_duration_since(nominal);
                    let mut batch = match stream.plan_batch() {
                        Ok(b) => b,
                        Err(e) => break Err(e),
                    };
                    batch.scheduling_delay_ms = delay.as_millis() as u64;
                    match stream.execute_batch(batch) {
                        Ok(r) => observer(&r),
                        Err(e) => break Err(e),
                    }
                    windows += 1;
                    k += 1;
                    if stream.source_ended() {
                        break Ok(windows);
                    }
                };
                let mut st = stream.inner.state.lock();
                st.status = if result.is_ok() { StreamStatus::Stopped } else { StreamStatus::Failed };
                result
            })
            .expect("spawn stream thread");
        RunHandle { stream: self.clone(), handle: Some(handle) }
    }
}

fn run_task(
    broker: &Broker,
    topic: &str,
    task: &TaskContext,
    range: OffsetRange,
    operator: &dyn Operator,
) -> Result<TaskOutput, OperatorError> {
    let records = broker
        .fetch_range(topic, task.partition, range.start, range.end)
        .map_err(|e| OperatorError::on_partition(task.partition, e.to_string()))?;
    let bytes = records.iter().map(|r| r.payload.len() as u64).sum();
    let saw_end = records.iter().any(is_end_marker);
    let data: Vec<Record> = records.into_iter().filter(|r| !is_end_marker(r)).collect();
    let event_times = data.iter().map(|r| r.event_time).collect();
    let mut partial = operator.process(task, &data).map_err(|mut e| {
        e.partition.get_or_insert(task.partition);
        e
    })?;
    partial.partition = task.partition;
    Ok(TaskOutput { partition: task.partition, partial, bytes, event_times, saw_end })
}

fn is_end_marker(r: &Record) -> bool {
    r.key.as_deref() == Some(END_OF_STREAM_KEY)
}

/// Appends an end-of-stream marker to every partition of `topic`.
pub fn close_source(broker: &Broker, topic: &str) -> Result<(), BrokerError> {
    let partitions = broker.topic_config(topic)?.partitions;
    for p in 0..partitions {
        broker.append_keyed(topic, p, Bytes::from_static(END_OF_STREAM_KEY), Bytes::new(), clock::now_ms())?;
    }
    Ok(())
}

/// Handle to a running stream loop.
pub struct RunHandle {
    stream: Stream,
    handle: Option<JoinHandle<Result<u64, EngineError>>>,
}

impl RunHandle {
    pub fn stream(&self) -> &Stream {
        &self.stream
    }

    pub fn stop(&self) {
        self.stream.stop();
    }

    pub fn is_finished(&self) -> bool {
        self.handle.as_ref().is_none_or(JoinHandle::is_finished)
    }

    /// Waits for the loop to end; returns the number of windows it executed.
    pub fn join(mut self) -> Result<u64, EngineError> {
        match self.handle.take() {
            Some(h) => h.join().unwrap_or(Err(EngineError::StreamFailed)),
            None => Ok(0),
        }
    }

    pub fn stop_and_join(self) -> Result<u64, EngineError> {
        self.stop();
        self.join()
    }
}

impl Drop for RunHandle {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            self.stream.stop();
            let _ = h.join();
        }
    }
}
