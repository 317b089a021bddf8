//! End-to-end experiment runner: pilots, producers, a stream, scheduled
//! scaling and the report bundle.

pub mod bench;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::broker::{Broker, TopicConfig};
use crate::engine::{close_source, OperatorConfig, StreamDefinition, StreamStatus, WindowBatch};
use crate::mass::{make_scenario, run_producers, ProductionReport, SinogramTemplate, SourceConfig, SourceKind, TemplateSourceConfig};
use crate::metrics::Metrics;
use crate::pilot::{Pilot, PilotComputeDescription, PilotComputeService, PilotState, BROKER, DEFAULT_WAIT, ENGINE};

/// Files every run writes, whatever else it records.
pub const REQUIRED_FILES: [&str; 5] = ["pilots.csv", "producer.csv", "windows.csv", "latency.csv", "summary.txt"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl ExperimentError {
    fn config(field: &str, message: impl Into<String>) -> Self {
        ExperimentError::Config { field: field.to_string(), message: message.into() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        ExperimentError::Runtime(e.to_string())
    }

    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 1,
            ExperimentError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerSection {
    #[serde(default = "default_partitions")]
    pub partitions: u32,
    #[serde(default)]
    pub retention_bytes: Option<u64>,
    #[serde(default)]
    pub retention_ms: Option<u64>,
    /// Keep segments under `<output>/broker-data`.
    #[serde(default)]
    pub persistent: bool,
}

fn default_partitions() -> u32 {
    12
}

impl Default for BrokerSection {
    fn default() -> Self {
        BrokerSection { partitions: default_partitions(), retention_bytes: None, retention_ms: None, persistent: false }
    }
}

/// Either a named scenario or an explicit plugin, plus overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub plugin: Option<SourceKind>,
    #[serde(default)]
    pub producers: Option<usize>,
    #[serde(default)]
    pub target_rate: Option<f64>,
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub total_messages: Option<u64>,
    /// Replace the light scenarios' random blobs with Shepp-Logan sinograms
    /// of the same size.
    #[serde(default)]
    pub real_sinogram: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    #[serde(default = "default_topic")]
    pub topic: String,
    #[serde(default = "default_group")]
    pub group: String,
    pub window_ms: u64,
    pub operator: String,
    #[serde(default)]
    pub operator_config: OperatorConfig,
    #[serde(default)]
    pub max_records_per_window: Option<u64>,
    #[serde(default)]
    pub max_retries: Option<u32>,
}

fn default_topic() -> String {
    "mass".into()
}

fn default_group() -> String {
    "masa".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendEvent {
    pub at_s: f64,
    pub extra_workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Overrides the generator and operator seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub broker: BrokerSection,
    /// One broker pilot and one engine pilot.
    #[serde(default = "default_pilots")]
    pub pilots: Vec<PilotComputeDescription>,
    pub source: SourceSection,
    pub stream: StreamSection,
    /// Extends of the engine pilot, by seconds since the stream started.
    #[serde(default)]
    pub schedule: Vec<ExtendEvent>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// How long to wait for the stream to drain after the source stops.
    #[serde(default = "default_drain")]
    pub drain_timeout_s: f64,
}

fn default_pilots() -> Vec<PilotComputeDescription> {
    vec![PilotComputeDescription::new(BROKER, 1), PilotComputeDescription::new(ENGINE, 2)]
}

fn default_drain() -> f64 {
    60.0
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            ExperimentError::config(
                if field == "." { "<document>" } else { &field },
                format!("{inner} (line {}, column {})", inner.line(), inner.column()),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.broker.partitions == 0 {
            return Err(ExperimentError::config("broker.partitions", "must be at least 1"));
        }
        for service in [BROKER, ENGINE] {
            let n = self.pilots.iter().filter(|p| p.service_type == service).count();
            if n != 1 {
                return Err(ExperimentError::config("pilots", format!("need exactly one `{service}` pilot, found {n}")));
            }
        }
        for (i, p) in self.pilots.iter().enumerate() {
            if p.service_type != BROKER && p.service_type != ENGINE {
                return Err(ExperimentError::config(&format!("pilots[{i}].service_type"), format!("unknown service type `{}`", p.service_type)));
            }
            if p.number_workers == 0 {
                return Err(ExperimentError::config(&format!("pilots[{i}].number_workers"), "must be at least 1"));
            }
        }
        if self.stream.window_ms == 0 {
            return Err(ExperimentError::config("stream.window_ms", "must be at least 1"));
        }
        let operators = crate::engine::OperatorRegistry::with_defaults();
        match operators.build(&self.stream.operator, &self.stream.operator_config) {
            None => {
                return Err(ExperimentError::config(
                    "stream.operator",
                    format!("unknown operator `{}` (known: {})", self.stream.operator, operators.names().join(", ")),
                ))
            }
            Some(Err(e)) => return Err(ExperimentError::config("stream.operator_config", e.message)),
            Some(Ok(_)) => {}
        }
        let mut last = f64::NEG_INFINITY;
        for (i, ev) in self.schedule.iter().enumerate() {
            if !(ev.at_s.is_finite() && ev.at_s >= 0.0 && ev.at_s > last) {
                return Err(ExperimentError::config(&format!("schedule[{i}].at_s"), "must be non-negative and strictly increasing"));
            }
            last = ev.at_s;
        }
        if !(self.drain_timeout_s > 0.0 && self.drain_timeout_s.is_finite()) {
            return Err(ExperimentError::config("drain_timeout_s", "must be positive"));
        }
        self.source_config()?;
        Ok(())
    }

    /// The producer configuration this experiment will run.
    pub fn source_config(&self) -> Result<SourceConfig, ExperimentError> {
        let s = &self.source;
        let topic = &self.stream.topic;
        let mut cfg = match (&s.scenario, &s.plugin) {
            (Some(name), None) => {
                let mut cfg = make_scenario(name, topic, 1.0).map_err(|e| ExperimentError::config("source.scenario", e.to_string()))?;
                cfg.duration_s = None;
                cfg
            }
            (None, Some(kind)) => SourceConfig::new(topic, kind.clone()),
            _ => return Err(ExperimentError::config("source", "set exactly one of `scenario` and `plugin`")),
        };
        if s.real_sinogram {
            let SourceKind::Template(t) = &cfg.source else {
                return Err(ExperimentError::config("source.real_sinogram", "only applies to template sources"));
            };
            let size = t.size_bytes.ok_or_else(|| ExperimentError::config("source.real_sinogram", "needs a sized template"))?;
            let image = if size > 4_000_000 { 256 } else { 128 };
            cfg.source = SourceKind::Template(TemplateSourceConfig {
                sinogram: Some(SinogramTemplate::sized(image, size)),
                ..Default::default()
            });
        }
        if let Some(p) = s.producers {
            cfg.producers = p;
        }
        cfg.target_rate = s.target_rate.or(cfg.target_rate);
        cfg.duration_s = s.duration_s;
        cfg.total_messages = s.total_messages;
        if let Some(seed) = self.seed {
            match &mut cfg.source {
                SourceKind::Cluster(c) => c.seed = seed,
                SourceKind::Template(t) => {
                    t.seed = seed;
                    if let Some(c) = t.cluster.as_mut() {
                        c.seed = seed;
                    }
                }
            }
        }
        cfg.validate().map_err(|e| ExperimentError::config("source", e.to_string()))?;
        Ok(cfg)
    }

    pub fn stream_definition(&self) -> StreamDefinition {
        let s = &self.stream;
        let mut def = StreamDefinition::new(&s.topic, &s.group, Duration::from_millis(s.window_ms), &s.operator);
        def.operator_config = s.operator_config.clone();
        if let (Some(seed), "kmeans") = (self.seed, s.operator.as_str()) {
            def.operator_config.insert("seed".into(), Value::from(seed));
        }
        def.max_records_per_window = s.max_records_per_window;
        if let Some(r) = s.max_retries {
            def.max_retries = r;
        }
        def
    }
}

/// What a finished run produced, beyond the files on disk.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub production: ProductionReport,
    pub windows: Vec<WindowBatch>,
    pub initial_offsets: Vec<u64>,
    pub committed: Vec<u64>,
    pub latest: Vec<u64>,
    pub status: StreamStatus,
    /// Data records processed, excluding end-of-stream markers.
    pub processed: u64,
    pub skipped: usize,
    pub summary: String,
}

impl ExperimentOutcome {
    /// Every appended record was committed exactly once and window ranges
    /// tile each partition without gaps.
    pub fn conservation_violations(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let partitions = self.initial_offsets.len() as u64;
        let committed: u64 = self.committed.iter().zip(&self.initial_offsets).map(|(c, i)| c - i).sum();
        if committed != self.production.messages + partitions {
            problems.push(format!(
                "committed {committed} records but produced {} plus {partitions} markers",
                self.production.messages
            ));
        }
        if self.committed != self.latest {
            problems.push(format!("committed {:?} lags latest {:?}", self.committed, self.latest));
        }
        if self.processed != self.production.messages {
            problems.push(format!("processed {} of {} produced", self.processed, self.production.messages));
        }
        let mut next = self.initial_offsets.clone();
        for (k, w) in self.windows.iter().enumerate() {
            if w.window_index != k as u64 {
                problems.push(format!("window {k} has index {}", w.window_index));
            }
            for (p, r) in &w.ranges {
                if r.start != next[*p as usize] {
                    problems.push(format!("window {k} partition {p} starts at {} not {}", r.start, next[*p as usize]));
                }
                next[*p as usize] = r.end;
            }
        }
        problems
    }
}

fn wait_running(pilot: &Pilot) -> Result<(), ExperimentError> {
    match pilot.wait(DEFAULT_WAIT).map_err(ExperimentError::runtime)? {
        PilotState::Running => Ok(()),
        s => Err(ExperimentError::Runtime(format!(
            "pilot {} ended {s:?}: {}",
            pilot.id(),
            pilot.failure().unwrap_or_default()
        ))),
    }
}

/// Runs `config`, writing the bundle to `output` (or the configured
/// directory). The bundle is written even when the run fails.
pub fn run_experiment(config: &ExperimentConfig, output: Option<&Path>) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    let out_dir = output
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("pilotstream-out"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| ExperimentError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let _ = std::fs::remove_file(out_dir.join("summary.txt"));
    let metrics = Metrics::new();
    let service = PilotComputeService::new(metrics.clone());
    let result = drive(config, &service, &metrics, &out_dir);
    service.shutdown();
    match result {
        Ok(mut outcome) => {
            outcome.files = write_bundle(&metrics, &out_dir, &outcome.summary)?;
            Ok(outcome)
        }
        Err(e) => {
            if !out_dir.join("summary.txt").exists() {
                let _ = write_bundle(&metrics, &out_dir, &format!("status: failed\nerror: {e}\n"));
            }
            Err(e)
        }
    }
}

fn write_bundle(metrics: &Metrics, dir: &Path, summary: &str) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut files = metrics.export_csv(dir).map_err(ExperimentError::runtime)?;
    let path = dir.join("summary.txt");
    std::fs::write(&path, summary).map_err(ExperimentError::runtime)?;
    files.push(path);
    Ok(files)
}

fn drive(
    config: &ExperimentConfig,
    service: &PilotComputeService,
    metrics: &Metrics,
    out_dir: &Path,
) -> Result<ExperimentOutcome, ExperimentError> {
    let source = config.source_config()?;
    let mut broker_desc = config.pilots.iter().find(|p| p.service_type == BROKER).expect("validated").clone();
    if config.broker.persistent {
        let data = out_dir.join("broker-data");
        if data.exists() {
            std::fs::remove_dir_all(&data).map_err(ExperimentError::runtime)?;
        }
        broker_desc.config.insert("data_dir".into(), data.display().to_string());
    }
    let broker_pilot = service.create_pilot(broker_desc).map_err(ExperimentError::runtime)?;
    wait_running(&broker_pilot)?;
    let broker: Broker = broker_pilot
        .get_context()
        .map_err(ExperimentError::runtime)?
        .broker()
        .cloned()
        .ok_or_else(|| ExperimentError::Runtime("broker pilot has no broker context".into()))?;
    let mut topic = TopicConfig::new(&config.stream.topic, config.broker.partitions);
    topic.retention_bytes = config.broker.retention_bytes;
    topic.retention_ms = config.broker.retention_ms;
    broker.create_topic(topic).map_err(ExperimentError::runtime)?;

    let engine_desc = config.pilots.iter().find(|p| p.service_type == ENGINE).expect("validated").clone();
    let engine_pilot = service.create_pilot(engine_desc).map_err(ExperimentError::runtime)?;
    wait_running(&engine_pilot)?;
    let engine = engine_pilot
        .get_context()
        .map_err(ExperimentError::runtime)?
        .engine()
        .cloned()
        .ok_or_else(|| ExperimentError::Runtime("engine pilot has no engine context".into()))?;
    let stream = engine.define_stream(&broker, config.stream_definition()).map_err(ExperimentError::runtime)?;

    let started = Instant::now();
    let handle = stream.run();
    let producers_done = AtomicBool::new(false);
    let stop_producers = AtomicBool::new(false);
    let (production, scale_errors) = std::thread::scope(|s| {
        let scaler = s.spawn(|| {
            let mut errors = Vec::new();
            for ev in &config.schedule {
                let due = started + Duration::from_secs_f64(ev.at_s);
                while Instant::now() < due && !producers_done.load(Ordering::Relaxed) {
                    std::thread::sleep((due - Instant::now()).min(Duration::from_millis(20)));
                }
                if producers_done.load(Ordering::Relaxed) {
                    break;
                }
                if let Err(e) = engine_pilot.extend(ev.extra_workers) {
                    errors.push(format!("extend at {}s: {e}", ev.at_s));
                }
            }
            errors
        });
        let watchdog = s.spawn(|| {
            // stop producing early if the stream dies
            while !producers_done.load(Ordering::Relaxed) {
                if stream.status() == StreamStatus::Failed {
                    stop_producers.store(true, Ordering::Relaxed);
                    break;
                }
                std::thread::sleep(Duration::from_millis(50));
            }
        });
        let production = run_producers(&broker, &source, metrics, Some(&stop_producers));
        producers_done.store(true, Ordering::Relaxed);
        let scale_errors = scaler.join().expect("scheduler thread");
        watchdog.join().expect("watchdog thread");
        (production, scale_errors)
    });
    let production = production.map_err(ExperimentError::runtime)?;
    close_source(&broker, &config.stream.topic).map_err(ExperimentError::runtime)?;

    let drain_deadline = Instant::now() + Duration::from_secs_f64(config.drain_timeout_s);
    while !handle.is_finished() && Instant::now() < drain_deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    let drained = handle.is_finished();
    let run_result = handle.stop_and_join();
    let elapsed = started.elapsed();

    let windows = stream.ledger();
    let latest = broker.latest_offsets(&config.stream.topic).map_err(ExperimentError::runtime)?;
    let snapshot = metrics.snapshot(&format!("engine:{}", config.stream.group)).map_err(ExperimentError::runtime)?;
    let outcome = ExperimentOutcome {
        output_dir: out_dir.to_path_buf(),
        files: Vec::new(),
        production,
        processed: snapshot.total_messages,
        skipped: stream.skipped_total(),
        windows,
        initial_offsets: stream.initial_offsets().to_vec(),
        committed: stream.committed(),
        latest,
        status: stream.status(),
        summary: String::new(),
    };
    let mut summary = String::new();
    let w = &mut summary;
    let _ = writeln!(w, "name: {}", config.name.as_deref().unwrap_or("experiment"));
    let _ = writeln!(w, "elapsed_s: {:.3}", elapsed.as_secs_f64());
    let _ = writeln!(w, "produced_messages: {}", outcome.production.messages);
    let _ = writeln!(w, "produced_bytes: {}", outcome.production.bytes);
    let _ = writeln!(w, "producer_msgs_per_s: {:.3}", outcome.production.messages_per_second());
    let _ = writeln!(w, "producer_mb_per_s: {:.3}", outcome.production.megabytes_per_second());
    let _ = writeln!(w, "producer_saturated: {}", outcome.production.saturated);
    let _ = writeln!(w, "windows: {}", outcome.windows.len());
    let _ = writeln!(w, "processed_messages: {}", outcome.processed);
    let _ = writeln!(w, "skipped_messages: {}", outcome.skipped);
    let _ = writeln!(w, "engine_msgs_per_s: mean {:.3} max {:.3}", snapshot.messages_per_second.mean, snapshot.messages_per_second.max);
    let _ = writeln!(
        w,
        "latency_ms: mean {:.1} p50 {:.1} p95 {:.1} p99 {:.1} max {:.1}",
        snapshot.latency.mean, snapshot.latency.p50, snapshot.latency.p95, snapshot.latency.p99, snapshot.latency.max
    );
    for p in metrics.pilots() {
        let _ = writeln!(w, "pilot {} ({}): {} workers, startup {:.1} ms", p.pilot_id, p.service_type, p.workers, p.startup_ms);
    }
    for e in metrics.scale_events() {
        let _ = writeln!(w, "extend {}: {} -> {} workers in {:.1} ms", e.pilot_id, e.workers_before, e.workers_after, e.millis);
    }
    let violations = outcome.conservation_violations();
    let _ = writeln!(w, "conservation: {}", if violations.is_empty() { "ok".to_string() } else { violations.join("; ") });
    let _ = writeln!(w, "stream_status: {:?}", outcome.status);

    let failure = match (&run_result, drained) {
        (Err(e), _) => Some(e.to_string()),
        (Ok(_), false) => Some(format!("stream did not drain within {} s", config.drain_timeout_s)),
        _ if !scale_errors.is_empty() => Some(scale_errors.join("; ")),
        _ => None,
    };
    let _ = writeln!(w, "status: {}", if failure.is_some() { "failed" } else { "ok" });
    if let Some(f) = failure {
        let _ = writeln!(w, "error: {f}");
        let _ = write_bundle(metrics, out_dir, &summary);
        return Err(ExperimentError::Runtime(f));
    }
    Ok(ExperimentOutcome { summary, ..outcome })
}
