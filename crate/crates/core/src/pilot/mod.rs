//! Pilot abstraction: placeholder allocations of workers for the broker and
//! engine services, created through a plugin SPI.
//!
//! A [`PilotComputeService`] turns a [`PilotComputeDescription`] into a
//! [`Pilot`] by handing it to the plugin registered for its service type.
//! Running pilots accept compute units, expose their service's native handle
//! through [`Pilot::get_context`], and can be grown at runtime either with
//! [`Pilot::extend`] or by creating a child pilot that names them as parent.

mod plugins;
mod pool;
mod unit;

pub use plugins::{BrokerPlugin, EnginePlugin, NoopPlugin};
pub use pool::{Job, ResizeHook, WorkerId, WorkerPool};
pub use unit::{ComputeUnit, FunctionRegistry, UnitFn, UnitState};

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::broker::Broker;
use crate::engine::{Engine, OperatorRegistry};
use crate::metrics::{Metrics, PilotRow, ScaleRow};

pub const BROKER: &str = "broker";
pub const ENGINE: &str = "engine";
pub const DEFAULT_WAIT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum PilotError {
    #[error("no plugin registered for service type `{0}`")]
    UnknownServiceType(String),
    #[error("invalid pilot description: {0}")]
    InvalidDescription(String),
    #[error("unknown parent pilot `{0}`")]
    UnknownParent(String),
    #[error("plugin could not start workers: {0}")]
    SpawnFailure(String),
    #[error("pilot is {0:?}, not RUNNING")]
    NotRunning(PilotState),
    #[error("timed out waiting for pilot")]
    TimedOut,
    #[error("unknown compute-unit function `{0}`")]
    UnknownFunction(String),
    #[error("compute unit {unit} failed: {message}")]
    TaskFailed { unit: u64, message: String },
}

/// Key/value resource request for one pilot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotComputeDescription {
    pub service_type: String,
    pub number_workers: usize,
    #[serde(default = "one")]
    pub cores_per_worker: usize,
    #[serde(default)]
    pub parent_pilot: Option<String>,
    /// Passed through to the plugin untouched.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

fn one() -> usize {
    1
}

impl PilotComputeDescription {
    pub fn new(service_type: &str, number_workers: usize) -> Self {
        PilotComputeDescription {
            service_type: service_type.to_string(),
            number_workers,
            cores_per_worker: 1,
            parent_pilot: None,
            config: BTreeMap::new(),
        }
    }

    pub fn cores(mut self, cores_per_worker: usize) -> Self {
        self.cores_per_worker = cores_per_worker;
        self
    }

    pub fn parent(mut self, parent: &str) -> Self {
        self.parent_pilot = Some(parent.to_string());
        self
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    fn validate(&self) -> Result<(), PilotError> {
        if self.number_workers == 0 {
            return Err(PilotError::InvalidDescription("number_workers must be >= 1".into()));
        }
        if self.cores_per_worker == 0 {
            return Err(PilotError::InvalidDescription("cores_per_worker must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PilotState {
    Pending,
    Running,
    Done,
    Failed,
    Canceled,
}

impl PilotState {
    pub fn is_terminal(self) -> bool {
        matches!(self, PilotState::Done | PilotState::Failed | PilotState::Canceled)
    }

    fn can_move_to(self, next: PilotState) -> bool {
        use PilotState::*;
        matches!((self, next), (Pending, Running) | (Pending, Failed) | (Pending, Canceled))
            || (self == Running && next.is_terminal())
    }
}

/// What a plugin reports about its job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobStatus {
    Pending,
    Running,
    Failed(String),
}

/// Native handle exposed by a running pilot.
#[derive(Clone)]
pub enum ServiceContext {
    Broker(Broker),
    Engine(Engine),
    Custom(BTreeMap<String, String>),
}

impl ServiceContext {
    pub fn broker(&self) -> Option<&Broker> {
        match self {
            ServiceContext::Broker(b) => Some(b),
            _ => None,
        }
    }

    pub fn engine(&self) -> Option<&Engine> {
        match self {
            ServiceContext::Engine(e) => Some(e),
            _ => None,
        }
    }
}

impl std::fmt::Debug for ServiceContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServiceContext::Broker(b) => f.debug_tuple("Broker").field(b).finish(),
            ServiceContext::Engine(_) => f.write_str("Engine(..)"),
            ServiceContext::Custom(m) => f.debug_tuple("Custom").field(m).finish(),
        }
    }
}

/// Arguments handed to [`PilotPlugin::submit_job`].
pub struct JobRequest<'a> {
    pub pilot_id: &'a str,
    pub description: &'a PilotComputeDescription,
    /// Pool the plugin must start its workers in. For child pilots this is
    /// the parent's pool.
    pub pool: &'a WorkerPool,
    /// Native context of the parent pilot, if any.
    pub parent_context: Option<ServiceContext>,
}

/// Plugin entry point: launches the service for one pilot.
pub trait PilotPlugin: Send + Sync {
    fn submit_job(&self, request: JobRequest<'_>) -> Result<Box<dyn PluginJob>, PilotError>;
}

/// The per-pilot half of the plugin interface.
pub trait PluginJob: Send + Sync {
    /// Blocks up to `timeout` for the job to leave the pending state.
    fn wait(&self, timeout: Duration) -> JobStatus;
    fn extend(&self, pool: &WorkerPool, extra_workers: usize) -> Result<(), PilotError>;
    fn get_context(&self) -> ServiceContext;
    fn get_config_data(&self) -> BTreeMap<String, String>;
    fn cancel(&self) {}
}

struct Lifecycle {
    state: PilotState,
    transitions: Vec<(PilotState, Duration)>,
    startup: Option<Duration>,
    failure: Option<String>,
}

struct PilotInner {
    id: String,
    description: PilotComputeDescription,
    created: Instant,
    lifecycle: Mutex<Lifecycle>,
    changed: Condvar,
    job: Box<dyn PluginJob>,
    pool: WorkerPool,
    owns_pool: bool,
    functions: FunctionRegistry,
    metrics: Metrics,
    children: Mutex<Vec<Pilot>>,
    next_unit: AtomicU64,
}

/// Handle to one pilot; clones refer to the same allocation.
#[derive(Clone)]
pub struct Pilot {
    inner: Arc<PilotInner>,
}

impl std::fmt::Debug for Pilot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pilot")
            .field("id", &self.inner.id)
            .field("service_type", &self.inner.description.service_type)
            .field("state", &self.state())
            .finish()
    }
}

impl Pilot {
    pub fn id(&self) -> &str {
        &self.inner.id
    }

    pub fn description(&self) -> &PilotComputeDescription {
        &self.inner.description
    }

    pub fn state(&self) -> PilotState {
        self.inner.lifecycle.lock().state
    }

    pub fn failure(&self) -> Option<String> {
        self.inner.lifecycle.lock().failure.clone()
    }

    /// Every state entered, with the time since creation.
    pub fn transitions(&self) -> Vec<(PilotState, Duration)> {
        self.inner.lifecycle.lock().transitions.clone()
    }

    /// RUNNING timestamp minus creation timestamp, once running.
    pub fn startup_time(&self) -> Option<Duration> {
        self.inner.lifecycle.lock().startup
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.inner.pool
    }

    /// Worker count: the whole pool for a root pilot (children included), the
    /// pilot's own workers for a child.
    pub fn workers(&self) -> usize {
        if self.inner.owns_pool {
            self.inner.pool.len()
        } else {
            self.inner.pool.owned_by(&self.inner.id)
        }
    }

    fn transition(&self, next: PilotState, failure: Option<String>) -> bool {
        let mut lc = self.inner.lifecycle.lock();
        if !lc.state.can_move_to(next) {
            return false;
        }
        let at = self.inner.created.elapsed();
        lc.state = next;
        lc.transitions.push((next, at));
        if next == PilotState::Running {
            lc.startup = Some(at);
        }
        if failure.is_some() {
            lc.failure = failure;
        }
        drop(lc);
        self.inner.changed.notify_all();
        if next == PilotState::Running {
            self.inner.metrics.record_pilot(PilotRow {
                pilot_id: self.inner.id.clone(),
                service_type: self.inner.description.service_type.clone(),
                workers: self.workers(),
                startup_ms: at.as_secs_f64() * 1e3,
            });
        }
        true
    }

    /// Blocks until the pilot is RUNNING or terminal and returns that state.
    pub fn wait(&self, timeout: Duration) -> Result<PilotState, PilotError> {
        let deadline = Instant::now().checked_add(timeout);
        let mut lc = self.inner.lifecycle.lock();
        while lc.state == PilotState::Pending {
            let Some(deadline) = deadline else {
                self.inner.changed.wait(&mut lc);
                continue;
            };
            if self.inner.changed.wait_until(&mut lc, deadline).timed_out() && lc.state == PilotState::Pending {
                return Err(PilotError::TimedOut);
            }
        }
        Ok(lc.state)
    }

    fn require_running(&self) -> Result<(), PilotError> {
        match self.state() {
            PilotState::Running => Ok(()),
            s => Err(PilotError::NotRunning(s)),
        }
    }

    /// Adds workers to a running pilot and returns the new worker count.
    pub fn extend(&self, extra_workers: usize) -> Result<usize, PilotError> {
        self.require_running()?;
        let before = self.workers();
        if extra_workers == 0 {
            return Ok(before);
        }
        let started = Instant::now();
        self.inner.job.extend(&self.inner.pool, extra_workers)?;
        let after = self.workers();
        log::info!("pilot {} extended {before} -> {after} workers", self.inner.id);
        self.inner.metrics.record_scale(ScaleRow {
            at_ms: crate::clock::now_ms(),
            pilot_id: self.inner.id.clone(),
            workers_before: before,
            workers_after: after,
            millis: started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(after)
    }

    /// Queues a call of the registered function `name` on this pilot's workers.
    pub fn submit(&self, name: &str, argument: Value) -> Result<ComputeUnit, PilotError> {
        self.require_running()?;
        let f = self.inner.functions.get(name).ok_or_else(|| PilotError::UnknownFunction(name.to_string()))?;
        let unit = ComputeUnit::new(self.inner.next_unit.fetch_add(1, Ordering::Relaxed), name);
        let handle = unit.clone();
        self.inner.pool.execute(Box::new(move || {
            handle.mark_running();
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(argument)))
                .unwrap_or_else(|_| Err("task panicked".to_string()));
            handle.finish(outcome);
        }));
        Ok(unit)
    }

    pub fn get_context(&self) -> Result<ServiceContext, PilotError> {
        self.require_running()?;
        Ok(self.inner.job.get_context())
    }

    pub fn get_config_data(&self) -> BTreeMap<String, String> {
        let mut data = self.inner.job.get_config_data();
        data.insert("pilot_id".into(), self.inner.id.clone());
        data.insert("workers".into(), self.workers().to_string());
        data
    }

    fn release(&self, terminal: PilotState) -> bool {
        let children: Vec<Pilot> = self.inner.children.lock().drain(..).collect();
        for c in children {
            c.release(terminal);
        }
        if !self.transition(terminal, None) {
            return false;
        }
        self.inner.job.cancel();
        if self.inner.owns_pool {
            self.inner.pool.shutdown();
        } else {
            self.inner.pool.remove_workers(&self.inner.id);
        }
        true
    }

    /// Cancels the pilot. Workers finish their queued tasks, then exit; for a
    /// child pilot this shrinks the parent's pool.
    pub fn cancel(&self) -> bool {
        self.release(PilotState::Canceled)
    }

    /// Marks a running pilot DONE and releases its workers.
    pub fn finish(&self) -> bool {
        self.release(PilotState::Done)
    }
}

/// Registry of plugins, functions and live pilots.
pub struct PilotComputeService {
    plugins: RwLock<HashMap<String, Arc<dyn PilotPlugin>>>,
    pilots: RwLock<BTreeMap<String, Pilot>>,
    functions: FunctionRegistry,
    metrics: Metrics,
    next_id: AtomicU64,
}

impl Default for PilotComputeService {
    fn default() -> Self {
        Self::new(Metrics::new())
    }
}

impl PilotComputeService {
    /// Service with the broker and engine plugins (default operators) and the
    /// builtin compute-unit functions registered.
    pub fn new(metrics: Metrics) -> Self {
        Self::with_operators(metrics, OperatorRegistry::with_defaults())
    }

    pub fn with_operators(metrics: Metrics, operators: OperatorRegistry) -> Self {
        let svc = Self::empty(metrics.clone());
        svc.register_plugin(BROKER, Arc::new(BrokerPlugin));
        svc.register_plugin(ENGINE, Arc::new(EnginePlugin::new(operators, metrics)));
        svc
    }

    /// No plugins at all.
    pub fn empty(metrics: Metrics) -> Self {
        PilotComputeService {
            plugins: RwLock::new(HashMap::new()),
            pilots: RwLock::new(BTreeMap::new()),
            functions: FunctionRegistry::with_builtins(),
            metrics,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn functions(&self) -> &FunctionRegistry {
        &self.functions
    }

    pub fn register_plugin(&self, service_type: &str, plugin: Arc<dyn PilotPlugin>) {
        self.plugins.write().insert(service_type.to_string(), plugin);
    }

    pub fn pilot(&self, id: &str) -> Option<Pilot> {
        self.pilots.read().get(id).cloned()
    }

    pub fn pilots(&self) -> Vec<Pilot> {
        self.pilots.read().values().cloned().collect()
    }

    pub fn create_pilot(&self, description: PilotComputeDescription) -> Result<Pilot, PilotError> {
        description.validate()?;
        let plugin = self
            .plugins
            .read()
            .get(&description.service_type)
            .cloned()
            .ok_or_else(|| PilotError::UnknownServiceType(description.service_type.clone()))?;
        let parent = match &description.parent_pilot {
            Some(pid) => {
                let parent = self.pilot(pid).ok_or_else(|| PilotError::UnknownParent(pid.clone()))?;
                if parent.description().service_type != description.service_type {
                    return Err(PilotError::InvalidDescription(format!(
                        "service type `{}` does not match parent's `{}`",
                        description.service_type,
                        parent.description().service_type
                    )));
                }
                parent.require_running()?;
                Some(parent)
            }
            None => None,
        };
        let id = format!("pilot-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let created = Instant::now();
        let (pool, owns_pool) = match &parent {
            Some(p) => (p.inner.pool.clone(), false),
            None => (WorkerPool::new(&id), true),
        };
        let parent_context = parent.as_ref().map(|p| p.inner.job.get_context());
        let job = plugin.submit_job(JobRequest { pilot_id: &id, description: &description, pool: &pool, parent_context })?;
        let pilot = Pilot {
            inner: Arc::new(PilotInner {
                id: id.clone(),
                description,
                created,
                lifecycle: Mutex::new(Lifecycle {
                    state: PilotState::Pending,
                    transitions: vec![(PilotState::Pending, Duration::ZERO)],
                    startup: None,
                    failure: None,
                }),
                changed: Condvar::new(),
                job,
                pool,
                owns_pool,
                functions: self.functions.clone(),
                metrics: self.metrics.clone(),
                children: Mutex::new(Vec::new()),
                next_unit: AtomicU64::new(0),
            }),
        };
        if let Some(parent) = &parent {
            parent.inner.children.lock().push(pilot.clone());
        }
        let monitor = pilot.clone();
        std::thread::Builder::new()
            .name(format!("{id}-monitor"))
            .spawn(move || loop {
                if monitor.state() != PilotState::Pending {
                    return;
                }
                match monitor.inner.job.wait(Duration::from_millis(50)) {
                    JobStatus::Pending => continue,
                    JobStatus::Running => {
                        monitor.transition(PilotState::Running, None);
                        return;
                    }
                    JobStatus::Failed(msg) => {
                        log::warn!("pilot {} failed to start: {msg}", monitor.id());
                        monitor.transition(PilotState::Failed, Some(msg));
                        return;
                    }
                }
            })
            .map_err(|e| PilotError::SpawnFailure(e.to_string()))?;
        self.pilots.write().insert(id, pilot.clone());
        Ok(pilot)
    }

    /// Cancels every non-terminal pilot.
    pub fn shutdown(&self) {
        for p in self.pilots() {
            if !p.state().is_terminal() {
                p.cancel();
            }
        }
    }
}
