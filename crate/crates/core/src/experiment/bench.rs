//! Benchmark drivers behind `bench startup`, `bench produce` and
//! `bench process`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;

use super::ExperimentError;
use crate::broker::{Broker, Record, Target, TopicConfig};
use crate::engine::{Engine, OperatorConfig, OperatorRegistry, StreamDefinition, TaskContext};
use crate::mass::{make_scenario, run_producers, SinogramTemplate, SourceKind, TemplateSourceConfig};
use crate::metrics::Metrics;
use crate::pilot::{PilotComputeDescription, PilotComputeService, PilotState, WorkerId, BROKER, DEFAULT_WAIT, ENGINE};

fn runtime(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartupRow {
    pub service_type: String,
    pub workers: usize,
    pub startup_ms: f64,
}

/// Creates and cancels one pilot per size and service type.
pub fn bench_startup(sizes: &[usize]) -> Result<Vec<StartupRow>, ExperimentError> {
    let service = PilotComputeService::new(Metrics::new());
    let mut rows = Vec::new();
    for service_type in [BROKER, ENGINE] {
        for &n in sizes {
            let pilot = service.create_pilot(PilotComputeDescription::new(service_type, n)).map_err(runtime)?;
            let state = pilot.wait(DEFAULT_WAIT).map_err(runtime)?;
            if state != PilotState::Running {
                return Err(ExperimentError::Runtime(format!("{service_type} pilot of {n} workers ended {state:?}")));
            }
            let startup = pilot.startup_time().unwrap_or_default();
            rows.push(StartupRow { service_type: service_type.to_string(), workers: n, startup_ms: startup.as_secs_f64() * 1e3 });
            pilot.cancel();
        }
    }
    service.shutdown();
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProduceRow {
    pub scenario: String,
    pub producers: usize,
    pub messages: u64,
    pub seconds: f64,
    pub msgs_per_s: f64,
    pub mb_per_s: f64,
    /// Median over whole seconds of the run.
    pub median_msgs_per_s: f64,
}

/// Unthrottled producers for `duration_s` per producer count. The topic
/// keeps at most `RETAINED` payload bytes so long runs stay in memory.
pub fn bench_produce(scenario: &str, producers: &[usize], duration_s: f64) -> Result<Vec<ProduceRow>, ExperimentError> {
    const RETAINED: u64 = 256 << 20;
    let mut rows = Vec::new();
    for &p in producers {
        let mut cfg = make_scenario(scenario, "bench", duration_s)
            .map_err(|e| ExperimentError::Config { field: "scenario".into(), message: e.to_string() })?;
        cfg.producers = p;
        let broker = Broker::in_memory();
        broker.create_topic(TopicConfig::new("bench", 12).with_retention_bytes(RETAINED)).map_err(runtime)?;
        let done = AtomicBool::new(false);
        let report = std::thread::scope(|s| {
            s.spawn(|| {
                while !done.load(Ordering::Relaxed) {
                    let _ = broker.enforce_retention("bench");
                    std::thread::sleep(Duration::from_millis(20));
                }
            });
            let r = run_producers(&broker, &cfg, &Metrics::new(), None);
            done.store(true, Ordering::Relaxed);
            r
        })
        .map_err(runtime)?;
        rows.push(ProduceRow {
            scenario: scenario.to_string(),
            producers: p,
            messages: report.messages,
            seconds: report.elapsed_s,
            msgs_per_s: report.messages_per_second(),
            mb_per_s: report.megabytes_per_second(),
            median_msgs_per_s: median(report.totals_by_second().into_iter().map(|m| m as f64).collect()),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ProcessOptions {
    /// ML-EM iterations.
    pub iterations: usize,
    /// Reconstruction image size; the sinogram is sized to `sinogram_bytes`.
    pub image_size: usize,
    pub sinogram_bytes: usize,
    pub partitions: u32,
    /// Target processing time of one window.
    pub window_target: Duration,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        ProcessOptions {
            iterations: 20,
            image_size: 128,
            sinogram_bytes: 2_000_000,
            partitions: 12,
            window_target: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessRow {
    pub operator: String,
    pub workers: usize,
    pub windows: usize,
    pub messages: u64,
    pub seconds: f64,
    pub msgs_per_s: f64,
    /// Median over windows of records / processing time.
    pub median_window_msgs_per_s: f64,
}

/// Payload and operator config used to benchmark `operator`.
pub fn process_workload(operator: &str, opts: &ProcessOptions) -> Result<(Bytes, OperatorConfig), ExperimentError> {
    let mut cfg = OperatorConfig::new();
    let payload = match operator {
        "kmeans" => {
            let Ok(SourceKind::Cluster(c)) = make_scenario("kmeans-random", "bench", 1.0).map(|s| s.source) else {
                unreachable!("kmeans-random is a cluster source");
            };
            TemplateSourceConfig { cluster: Some(c), ..Default::default() }.payload().map_err(runtime)?
        }
        "gridrec" | "mlem" => {
            cfg.insert("iterations".into(), opts.iterations.into());
            cfg.insert("image_size".into(), opts.image_size.into());
            cfg.insert("emit_images".into(), false.into());
            Bytes::from(SinogramTemplate::sized(opts.image_size, opts.sinogram_bytes).payload())
        }
        "identity" | "sleep" => Bytes::from(vec![0u8; 1024]),
        other => {
            return Err(ExperimentError::Config { field: "operator".into(), message: format!("unknown operator `{other}`") })
        }
    };
    Ok((payload, cfg))
}

/// Runs `operator` over a pre-filled backlog of identical messages for about
/// `duration_s` per worker count, sizing windows to `opts.window_target`.
pub fn bench_process(
    operator: &str,
    workers: &[usize],
    duration_s: f64,
    opts: &ProcessOptions,
) -> Result<Vec<ProcessRow>, ExperimentError> {
    let (payload, op_cfg) = process_workload(operator, opts)?;
    let registry = OperatorRegistry::with_defaults();
    // two messages on this thread calibrate the backlog size; the first
    // one is excluded because it may seed operator state
    let probe = registry.build(operator, &op_cfg).expect("known operator").map_err(runtime)?;
    let task = TaskContext { window_index: 0, partition: 0, attempt: 0, worker: WorkerId(0) };
    let mut per_message: f64 = 0.0;
    for i in 0..2u64 {
        let record = Record {
            topic: Arc::from("bench"),
            partition: 0,
            offset: i,
            event_time: 0,
            key: None,
            payload: payload.clone(),
        };
        let t = Instant::now();
        let partial = probe.process(&task, std::slice::from_ref(&record)).map_err(runtime)?;
        probe.merge(i, vec![partial]).map_err(runtime)?;
        if i > 0 {
            per_message = t.elapsed().as_secs_f64();
        }
    }
    let per_message = per_message.max(1e-6);
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());

    let mut rows = Vec::new();
    for &w in workers {
        let rate = w.min(cpus) as f64 / per_message;
        let backlog = ((rate * duration_s * 1.5).ceil() as u64).clamp(opts.partitions as u64 * 2, 200_000);
        let cap = ((rate * opts.window_target.as_secs_f64()) / opts.partitions as f64).ceil().max(1.0) as u64;

        let service = PilotComputeService::with_operators(Metrics::new(), registry.clone());
        let broker = service.create_pilot(PilotComputeDescription::new(BROKER, 1)).map_err(runtime)?;
        broker.wait(DEFAULT_WAIT).map_err(runtime)?;
        let broker = broker.get_context().map_err(runtime)?.broker().cloned().expect("broker context");
        broker.create_topic(TopicConfig::new("bench", opts.partitions)).map_err(runtime)?;
        let fill = |n: u64| -> Result<(), ExperimentError> {
            for _ in 0..n {
                broker.append("bench", Target::RoundRobin, payload.clone(), crate::clock::now_ms()).map_err(runtime)?;
            }
            Ok(())
        };
        fill(backlog)?;
        let engine_pilot = service.create_pilot(PilotComputeDescription::new(ENGINE, w)).map_err(runtime)?;
        engine_pilot.wait(DEFAULT_WAIT).map_err(runtime)?;
        let engine: Engine = engine_pilot.get_context().map_err(runtime)?.engine().cloned().expect("engine context");
        let mut def = StreamDefinition::new("bench", "bench", Duration::from_secs(1), operator);
        def.operator_config = op_cfg.clone();
        def.max_records_per_window = Some(cap);
        let stream = engine.define_stream(&broker, def).map_err(runtime)?;

        let started = Instant::now();
        let mut messages = 0;
        let mut per_window = Vec::new();
        while started.elapsed().as_secs_f64() < duration_s {
            let r = stream.step().map_err(runtime)?;
            if r.batch.record_count == 0 {
                // calibration underestimated the rate; top the backlog up
                fill(backlog)?;
                continue;
            }
            messages += r.batch.record_count;
            per_window.push(r.batch.record_count as f64 / (r.batch.processing_ms / 1e3).max(1e-9));
        }
        let seconds = started.elapsed().as_secs_f64();
        let windows = per_window.len();
        rows.push(ProcessRow {
            operator: operator.to_string(),
            workers: w,
            windows,
            messages,
            seconds,
            msgs_per_s: messages as f64 / seconds.max(1e-9),
            median_window_msgs_per_s: median(per_window),
        });
        service.shutdown();
    }
    Ok(rows)
}

/// Lower median; 0 for an empty sample.
pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    if xs.is_empty() {
        0.0
    } else {
        xs[(xs.len() - 1) / 2]
    }
}
