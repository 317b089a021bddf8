//! Built-in plugins: in-process broker, micro-batch engine, and a no-op
//! plugin for extensibility checks.
//!
//! Recognized description config keys (all plugins):
//! `bootstrap_delay_ms` delays worker start, `fail_bootstrap=true` makes the
//! job fail instead of starting. Broker-only: `data_dir` enables segment
//! persistence, `max_payload` overrides the payload ceiling.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use super::{JobRequest, JobStatus, PilotError, PilotPlugin, PluginJob, ServiceContext, WorkerPool};
use crate::broker::{Broker, DEFAULT_MAX_PAYLOAD};
use crate::engine::{Engine, OperatorRegistry};
use crate::metrics::Metrics;

struct Bootstrap {
    status: Mutex<JobStatus>,
    cv: Condvar,
}

impl Bootstrap {
    /// Starts the job's workers on a background thread, honoring the fault
    /// injection keys.
    fn start(request: &JobRequest<'_>) -> Result<Arc<Bootstrap>, PilotError> {
        let config = &request.description.config;
        let delay = match config.get("bootstrap_delay_ms") {
            Some(v) => Duration::from_millis(
                v.parse().map_err(|_| PilotError::InvalidDescription(format!("bootstrap_delay_ms `{v}`")))?,
            ),
            None => Duration::ZERO,
        };
        let fail = config.get("fail_bootstrap").is_some_and(|v| v == "true");
        let boot = Arc::new(Bootstrap { status: Mutex::new(JobStatus::Pending), cv: Condvar::new() });
        let b = boot.clone();
        let pool = request.pool.clone();
        let owner = request.pilot_id.to_string();
        let workers = request.description.number_workers;
        std::thread::Builder::new()
            .name(format!("{owner}-bootstrap"))
            .spawn(move || {
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                let status = if fail {
                    JobStatus::Failed("bootstrap failure injected".into())
                } else {
                    match pool.spawn_workers(&owner, workers) {
                        Ok(_) => JobStatus::Running,
                        Err(e) => JobStatus::Failed(format!("spawning workers: {e}")),
                    }
                };
                *b.status.lock() = status;
                b.cv.notify_all();
            })
            .map_err(|e| PilotError::SpawnFailure(e.to_string()))?;
        Ok(boot)
    }

    fn wait(&self, timeout: Duration) -> JobStatus {
        let mut s = self.status.lock();
        if *s == JobStatus::Pending {
            self.cv.wait_for(&mut s, timeout);
        }
        s.clone()
    }
}

fn spawn_extra(pool: &WorkerPool, owner: &str, extra: usize) -> Result<(), PilotError> {
    pool.spawn_workers(owner, extra).map(|_| ()).map_err(|e| PilotError::SpawnFailure(e.to_string()))
}

/// Runs an in-process [`Broker`]. Child pilots share their parent's broker.
pub struct BrokerPlugin;

struct BrokerJob {
    owner: String,
    boot: Arc<Bootstrap>,
    broker: Broker,
}

impl PilotPlugin for BrokerPlugin {
    fn submit_job(&self, request: JobRequest<'_>) -> Result<Box<dyn PluginJob>, PilotError> {
        let broker = match request.parent_context.as_ref().and_then(ServiceContext::broker) {
            Some(b) => b.clone(),
            None => {
                let config = &request.description.config;
                let max_payload = match config.get("max_payload") {
                    Some(v) => v
                        .parse()
                        .map_err(|_| PilotError::InvalidDescription(format!("max_payload `{v}`")))?,
                    None => DEFAULT_MAX_PAYLOAD,
                };
                match config.get("data_dir") {
                    Some(dir) => Broker::open_with_max_payload(dir, max_payload)
                        .map_err(|e| PilotError::SpawnFailure(e.to_string()))?,
                    None => Broker::with_max_payload(max_payload),
                }
            }
        };
        let boot = Bootstrap::start(&request)?;
        Ok(Box::new(BrokerJob { owner: request.pilot_id.to_string(), boot, broker }))
    }
}

impl PluginJob for BrokerJob {
    fn wait(&self, timeout: Duration) -> JobStatus {
        self.boot.wait(timeout)
    }

    fn extend(&self, pool: &WorkerPool, extra_workers: usize) -> Result<(), PilotError> {
        spawn_extra(pool, &self.owner, extra_workers)
    }

    fn get_context(&self) -> ServiceContext {
        ServiceContext::Broker(self.broker.clone())
    }

    fn get_config_data(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("service".to_string(), "broker".to_string()),
            ("topics".to_string(), self.broker.topic_names().join(";")),
            ("persistent".to_string(), self.broker.is_persistent().to_string()),
            ("max_payload".to_string(), self.broker.max_payload().to_string()),
        ])
    }
}

/// Runs a micro-batch [`Engine`] whose tasks execute on the pilot's workers.
pub struct EnginePlugin {
    operators: OperatorRegistry,
    metrics: Metrics,
}

impl EnginePlugin {
    pub fn new(operators: OperatorRegistry, metrics: Metrics) -> Self {
        EnginePlugin { operators, metrics }
    }
}

struct EngineJob {
    owner: String,
    boot: Arc<Bootstrap>,
    engine: Engine,
}

impl PilotPlugin for EnginePlugin {
    fn submit_job(&self, request: JobRequest<'_>) -> Result<Box<dyn PluginJob>, PilotError> {
        let engine = match request.parent_context.as_ref().and_then(ServiceContext::engine) {
            Some(e) => e.clone(),
            None => Engine::new(request.pool.clone(), self.operators.clone(), self.metrics.clone()),
        };
        let boot = Bootstrap::start(&request)?;
        Ok(Box::new(EngineJob { owner: request.pilot_id.to_string(), boot, engine }))
    }
}

impl PluginJob for EngineJob {
    fn wait(&self, timeout: Duration) -> JobStatus {
        self.boot.wait(timeout)
    }

    fn extend(&self, pool: &WorkerPool, extra_workers: usize) -> Result<(), PilotError> {
        spawn_extra(pool, &self.owner, extra_workers)
    }

    fn get_context(&self) -> ServiceContext {
        ServiceContext::Engine(self.engine.clone())
    }

    fn get_config_data(&self) -> BTreeMap<String, String> {
        let ids: Vec<String> = self.engine.pool().worker_ids().iter().map(ToString::to_string).collect();
        BTreeMap::from([
            ("service".to_string(), "engine".to_string()),
            ("worker_ids".to_string(), ids.join(";")),
            ("operators".to_string(), self.engine.operators().names().join(";")),
        ])
    }
}

/// Starts workers and nothing else.
pub struct NoopPlugin;

struct NoopJob {
    owner: String,
    boot: Arc<Bootstrap>,
}

impl PilotPlugin for NoopPlugin {
    fn submit_job(&self, request: JobRequest<'_>) -> Result<Box<dyn PluginJob>, PilotError> {
        let boot = Bootstrap::start(&request)?;
        Ok(Box::new(NoopJob { owner: request.pilot_id.to_string(), boot }))
    }
}

impl PluginJob for NoopJob {
    fn wait(&self, timeout: Duration) -> JobStatus {
        self.boot.wait(timeout)
    }

    fn extend(&self, pool: &WorkerPool, extra_workers: usize) -> Result<(), PilotError> {
        spawn_extra(pool, &self.owner, extra_workers)
    }

    fn get_context(&self) -> ServiceContext {
        ServiceContext::Custom(self.get_config_data())
    }

    fn get_config_data(&self) -> BTreeMap<String, String> {
        BTreeMap::from([("service".to_string(), "noop".to_string())])
    }
}
