use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use parking_lot::RwLock;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::broker::Record;
use crate::pilot::WorkerId;

/// Free-form operator settings from the stream definition.
pub type OperatorConfig = Map<String, Value>;

#[derive(Debug, Clone, Error, PartialEq)]
#[error("operator error{}: {message}", partition.map(|p| format!(" on partition {p}")).unwrap_or_default())]
pub struct OperatorError {
    pub partition: Option<u32>,
    pub message: String,
}

impl OperatorError {
    pub fn new(message: impl Into<String>) -> Self {
        OperatorError { partition: None, message: message.into() }
    }

    pub fn on_partition(partition: u32, message: impl Into<String>) -> Self {
        OperatorError { partition: Some(partition), message: message.into() }
    }
}

/// Identifies one partition task of one window attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskContext {
    pub window_index: u64,
    pub partition: u32,
    /// 0 on the first try, incremented on each whole-batch retry.
    pub attempt: u32,
    pub worker: WorkerId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OutputRecord {
    pub partition: u32,
    pub offset: u64,
    pub data: Bytes,
}

/// Per-message processing time reported by reconstruction operators.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub partition: u32,
    pub offset: u64,
    pub algorithm: String,
    pub iterations: usize,
    pub millis: f64,
    pub rmse: Option<f64>,
}

/// Result of the per-partition phase.
#[derive(Default)]
pub struct PartialResult {
    pub partition: u32,
    pub outputs: Vec<OutputRecord>,
    /// Malformed messages dropped under the poison-message policy.
    pub skipped: usize,
    pub timings: Vec<Timing>,
    /// Operator-private state for the merge phase.
    pub state: Option<Box<dyn Any + Send>>,
}

impl std::fmt::Debug for PartialResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PartialResult")
            .field("partition", &self.partition)
            .field("outputs", &self.outputs.len())
            .field("skipped", &self.skipped)
            .finish()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowOutput {
    pub window_index: u64,
    /// Sorted by (partition, offset).
    pub outputs: Vec<OutputRecord>,
    pub skipped: usize,
    pub timings: Vec<Timing>,
}

/// A pluggable stream operator.
///
/// `process` may run concurrently for different partitions of the same
/// window. `merge` runs exclusively, once per successful window, and is the
/// only place an operator may mutate shared model state; a failed merge must
/// leave that state untouched.
pub trait Operator: Send + Sync {
    fn name(&self) -> &str;

    fn process(&self, task: &TaskContext, records: &[Record]) -> Result<PartialResult, OperatorError>;

    fn merge(&self, window_index: u64, partials: Vec<PartialResult>) -> Result<WindowOutput, OperatorError> {
        Ok(concat_partials(window_index, partials))
    }
}

/// Default merge: concatenation in (partition, offset) order.
pub fn concat_partials(window_index: u64, partials: Vec<PartialResult>) -> WindowOutput {
    let mut out = WindowOutput { window_index, ..Default::default() };
    for p in partials {
        out.outputs.extend(p.outputs);
        out.timings.extend(p.timings);
        out.skipped += p.skipped;
    }
    out.outputs.sort();
    out.timings.sort_by_key(|t| (t.partition, t.offset));
    out
}

/// Emits every payload unchanged.
pub struct IdentityOperator;

impl Operator for IdentityOperator {
    fn name(&self) -> &str {
        "identity"
    }

    fn process(&self, task: &TaskContext, records: &[Record]) -> Result<PartialResult, OperatorError> {
        Ok(PartialResult {
            partition: task.partition,
            outputs: records
                .iter()
                .map(|r| OutputRecord { partition: r.partition, offset: r.offset, data: r.payload.clone() })
                .collect(),
            ..Default::default()
        })
    }
}

/// Sleeps a fixed time per record and emits nothing; stands in for an
/// embarrassingly parallel workload whose cost does not depend on CPU count.
pub struct SleepOperator {
    pub per_record: Duration,
}

impl Operator for SleepOperator {
    fn name(&self) -> &str {
        "sleep"
    }

    fn process(&self, task: &TaskContext, records: &[Record]) -> Result<PartialResult, OperatorError> {
        std::thread::sleep(self.per_record * records.len() as u32);
        Ok(PartialResult { partition: task.partition, ..Default::default() })
    }
}

pub type OperatorFactory =
    Arc<dyn Fn(&OperatorConfig) -> Result<Arc<dyn Operator>, OperatorError> + Send + Sync>;

/// Name → operator factory.
#[derive(Clone, Default)]
pub struct OperatorRegistry {
    factories: Arc<RwLock<BTreeMap<String, OperatorFactory>>>,
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `identity`, `sleep`, `kmeans`, `gridrec` and `mlem`.
    pub fn with_defaults() -> Self {
        let r = Self::new();
        r.register("identity", |_| Ok(Arc::new(IdentityOperator) as Arc<dyn Operator>));
        r.register("sleep", |cfg| {
            let ms = cfg.get("ms_per_record").and_then(Value::as_f64).unwrap_or(1.0);
            if !(ms >= 0.0 && ms.is_finite()) {
                return Err(OperatorError::new("ms_per_record must be a non-negative number"));
            }
            Ok(Arc::new(SleepOperator { per_record: Duration::from_secs_f64(ms / 1e3) }) as Arc<dyn Operator>)
        });
        crate::masa::register_operators(&r);
        r
    }

    pub fn register<F>(&self, name: &str, factory: F)
    where
        F: Fn(&OperatorConfig) -> Result<Arc<dyn Operator>, OperatorError> + Send + Sync + 'static,
    {
        self.factories.write().insert(name.to_string(), Arc::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.read().contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.read().keys().cloned().collect()
    }

    /// `None` if no operator is registered under `name`.
    pub fn build(&self, name: &str, config: &OperatorConfig) -> Option<Result<Arc<dyn Operator>, OperatorError>> {
        let factory = self.factories.read().get(name).cloned()?;
        Some(factory(config))
    }
}
