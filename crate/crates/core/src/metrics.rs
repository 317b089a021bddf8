//! Throughput, latency and benchmark-ledger collection with CSV export.
//!
//! Every table is kept in memory behind one lock and rendered in a fixed
//! column order, so exporting twice without new samples yields identical
//! files. Timestamps in exported files are milliseconds since the metrics
//! origin (process start for the CLI).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use thiserror::Error;

use crate::clock;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("unknown metrics component `{0}`")]
    UnknownComponent(String),
    #[error("metrics export: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputSample {
    pub component: String,
    /// Wall second relative to the metrics origin.
    pub second: u64,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub component: String,
    /// Both in ms since the Unix epoch.
    pub event_time: u64,
    pub processed_at: u64,
}

impl LatencySample {
    pub fn latency_ms(&self) -> u64 {
        self.processed_at.saturating_sub(self.event_time)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Throughput(ThroughputSample),
    Latency(LatencySample),
}

/// Nearest-rank summary statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile of an ascending slice: element at rank ceil(p/100 * n).
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: nearest_rank(&sorted, 50.0),
            p95: nearest_rank(&sorted, 95.0),
            p99: nearest_rank(&sorted, 99.0),
            max: *sorted.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecondPoint {
    pub second: u64,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub component: String,
    /// Dense from second 0 to the last second with data.
    pub series: Vec<SecondPoint>,
    pub total_messages: u64,
    pub total_bytes: u64,
    pub latency: Summary,
    pub messages_per_second: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotRow {
    pub pilot_id: String,
    pub service_type: String,
    pub workers: usize,
    pub startup_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRow {
    pub window_index: u64,
    /// Epoch ms.
    pub planned_at_ms: u64,
    pub records: u64,
    pub bytes: u64,
    pub processing_ms: f64,
    pub scheduling_delay_ms: u64,
    pub backlog_records: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProducerRow {
    pub second: u64,
    pub producer_id: usize,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconRow {
    pub window_index: u64,
    pub message_offset: u64,
    pub algorithm: String,
    pub iterations: usize,
    pub millis: f64,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentRow {
    /// Epoch ms.
    pub at_ms: u64,
    pub window_index: u64,
    pub workers: usize,
    pub partition: u32,
    pub worker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRow {
    /// Epoch ms.
    pub at_ms: u64,
    pub pilot_id: String,
    pub workers_before: usize,
    pub workers_after: usize,
    pub millis: f64,
}

#[derive(Default)]
struct ComponentData {
    per_second: BTreeMap<u64, (u64, u64)>,
    latencies: Vec<(u64, u64)>,
}

#[derive(Default)]
struct Tables {
    components: BTreeMap<String, ComponentData>,
    pilots: Vec<PilotRow>,
    windows: Vec<WindowRow>,
    producer: Vec<ProducerRow>,
    reconstruction: Vec<ReconRow>,
    assignments: Vec<AssignmentRow>,
    scale: Vec<ScaleRow>,
}

/// Shared, thread-safe metrics sink. Clones share the same tables.
#[derive(Clone)]
pub struct Metrics {
    tables: Arc<Mutex<Tables>>,
    origin: Instant,
    origin_epoch_ms: u64,
}

impl Default for Metrics {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Metrics").field("origin_epoch_ms", &self.origin_epoch_ms).finish()
    }
}

pub const THROUGHPUT_HEADER: &str = "component,second,messages,bytes";
pub const LATENCY_HEADER: &str = "component,event_time_ms,processed_at_ms,latency_ms";
pub const PILOTS_HEADER: &str = "pilot_id,service_type,workers,startup_ms";
pub const WINDOWS_HEADER: &str =
    "window_index,planned_at_ms,records,bytes,processing_ms,scheduling_delay_ms,backlog_records";
pub const PRODUCER_HEADER: &str = "second,producer_id,messages,bytes";
pub const RECONSTRUCTION_HEADER: &str =
    "window_index,message_offset,algorithm,iterations,millis,rmse_if_reference";
pub const ASSIGNMENTS_HEADER: &str = "at_ms,window_index,workers,partition,worker";
pub const SCALE_HEADER: &str = "at_ms,pilot_id,workers_before,workers_after,millis";

impl Metrics {
    pub fn new() -> Self {
        Metrics {
            tables: Arc::new(Mutex::new(Tables::default())),
            origin: Instant::now(),
            origin_epoch_ms: clock::now_ms(),
        }
    }

    pub fn origin_epoch_ms(&self) -> u64 {
        self.origin_epoch_ms
    }

    /// Whole seconds since the origin.
    pub fn current_second(&self) -> u64 {
        self.origin.elapsed().as_secs()
    }

    pub fn register(&self, component: &str) {
        self.tables.lock().components.entry(component.to_string()).or_default();
    }

    pub fn components(&self) -> Vec<String> {
        self.tables.lock().components.keys().cloned().collect()
    }

    pub fn record(&self, sample: Sample) -> Result<(), MetricsError> {
        let mut t = self.tables.lock();
        match sample {
            Sample::Throughput(s) => {
                let c = t
                    .components
                    .get_mut(&s.component)
                    .ok_or_else(|| MetricsError::UnknownComponent(s.component.clone()))?;
                let slot = c.per_second.entry(s.second).or_default();
                slot.0 += s.messages;
                slot.1 += s.bytes;
            }
            Sample::Latency(s) => {
                let c = t
                    .components
                    .get_mut(&s.component)
                    .ok_or_else(|| MetricsError::UnknownComponent(s.component.clone()))?;
                c.latencies.push((s.event_time, s.processed_at));
            }
        }
        Ok(())
    }

    /// Throughput sample stamped with the current second.
    pub fn record_messages(&self, component: &str, messages: u64, bytes: u64) -> Result<(), MetricsError> {
        self.record(Sample::Throughput(ThroughputSample {
            component: component.to_string(),
            second: self.current_second(),
            messages,
            bytes,
        }))
    }

    pub fn record_latencies(
        &self,
        component: &str,
        processed_at: u64,
        event_times: impl IntoIterator<Item = u64>,
    ) -> Result<(), MetricsError> {
        let mut t = self.tables.lock();
        let c = t
            .components
            .get_mut(component)
            .ok_or_else(|| MetricsError::UnknownComponent(component.to_string()))?;
        c.latencies.extend(event_times.into_iter().map(|e| (e, processed_at)));
        Ok(())
    }

    pub fn snapshot(&self, component: &str) -> Result<Snapshot, MetricsError> {
        let t = self.tables.lock();
        let c = t
            .components
            .get(component)
            .ok_or_else(|| MetricsError::UnknownComponent(component.to_string()))?;
        let series = dense_series(&c.per_second);
        let latencies: Vec<f64> =
            c.latencies.iter().map(|&(e, p)| p.saturating_sub(e) as f64).collect();
        let rates: Vec<f64> = series.iter().map(|p| p.messages as f64).collect();
        Ok(Snapshot {
            component: component.to_string(),
            total_messages: series.iter().map(|p| p.messages).sum(),
            total_bytes: series.iter().map(|p| p.bytes).sum(),
            series,
            latency: Summary::of(&latencies),
            messages_per_second: Summary::of(&rates),
        })
    }

    pub fn record_pilot(&self, row: PilotRow) {
        self.tables.lock().pilots.push(row);
    }

    pub fn record_window(&self, row: WindowRow) {
        self.tables.lock().windows.push(row);
    }

    pub fn record_producer(&self, row: ProducerRow) {
        self.tables.lock().producer.push(row);
    }

    pub fn record_reconstruction(&self, row: ReconRow) {
        self.tables.lock().reconstruction.push(row);
    }

    pub fn record_assignment(&self, row: AssignmentRow) {
        self.tables.lock().assignments.push(row);
    }

    pub fn record_scale(&self, row: ScaleRow) {
        self.tables.lock().scale.push(row);
    }

    pub fn scale_events(&self) -> Vec<ScaleRow> {
        self.tables.lock().scale.clone()
    }

    pub fn pilots(&self) -> Vec<PilotRow> {
        self.tables.lock().pilots.clone()
    }

    pub fn windows(&self) -> Vec<WindowRow> {
        self.tables.lock().windows.clone()
    }

    pub fn producer_rows(&self) -> Vec<ProducerRow> {
        self.tables.lock().producer.clone()
    }

    pub fn reconstruction_rows(&self) -> Vec<ReconRow> {
        self.tables.lock().reconstruction.clone()
    }

    pub fn assignments(&self) -> Vec<AssignmentRow> {
        self.tables.lock().assignments.clone()
    }

    fn rel(&self, epoch_ms: u64) -> i64 {
        epoch_ms as i64 - self.origin_epoch_ms as i64
    }

    /// Renders every table as `(file name, contents)` in a fixed order.
    pub fn render_csv(&self) -> Vec<(&'static str, String)> {
        let t = self.tables.lock();

        let mut throughput = format!("{THROUGHPUT_HEADER}\n");
        let mut latency = format!("{LATENCY_HEADER}\n");
        for (name, c) in &t.components {
            for p in dense_series(&c.per_second) {
                let _ = writeln!(throughput, "{name},{},{},{}", p.second, p.messages, p.bytes);
            }
            for &(e, p) in &c.latencies {
                let _ = writeln!(latency, "{name},{},{},{}", self.rel(e), self.rel(p), p.saturating_sub(e));
            }
        }

        let mut pilots = format!("{PILOTS_HEADER}\n");
        for r in &t.pilots {
            let _ = writeln!(pilots, "{},{},{},{:.3}", r.pilot_id, r.service_type, r.workers, r.startup_ms);
        }

        let mut windows = format!("{WINDOWS_HEADER}\n");
        for r in &t.windows {
            let _ = writeln!(
                windows,
                "{},{},{},{},{:.3},{},{}",
                r.window_index,
                self.rel(r.planned_at_ms),
                r.records,
                r.bytes,
                r.processing_ms,
                r.scheduling_delay_ms,
                r.backlog_records
            );
        }

        let mut producer = format!("{PRODUCER_HEADER}\n");
        let mut rows = t.producer.clone();
        rows.sort_by_key(|r| (r.second, r.producer_id));
        for r in &rows {
            let _ = writeln!(producer, "{},{},{},{}", r.second, r.producer_id, r.messages, r.bytes);
        }

        let mut recon = format!("{RECONSTRUCTION_HEADER}\n");
        for r in &t.reconstruction {
            let rmse = r.rmse.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                recon,
                "{},{},{},{},{:.3},{}",
                r.window_index, r.message_offset, r.algorithm, r.iterations, r.millis, rmse
            );
        }

        let mut assignments = format!("{ASSIGNMENTS_HEADER}\n");
        for r in &t.assignments {
            let _ = writeln!(
                assignments,
                "{},{},{},{},{}",
                self.rel(r.at_ms),
                r.window_index,
                r.workers,
                r.partition,
                r.worker
            );
        }

        let mut scale = format!("{SCALE_HEADER}\n");
        for r in &t.scale {
            let _ = writeln!(
                scale,
                "{},{},{},{},{:.3}",
                self.rel(r.at_ms),
                r.pilot_id,
                r.workers_before,
                r.workers_after,
                r.millis
            );
        }

        vec![
            ("throughput.csv", throughput),
            ("latency.csv", latency),
            ("pilots.csv", pilots),
            ("windows.csv", windows),
            ("producer.csv", producer),
            ("reconstruction.csv", recon),
            ("assignments.csv", assignments),
            ("scale.csv", scale),
        ]
    }

    /// Writes one CSV per metric family into `dir`.
    pub fn export_csv(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>, MetricsError> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, body) in self.render_csv() {
            let path = dir.join(name);
            fs::write(&path, body)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn dense_series(per_second: &BTreeMap<u64, (u64, u64)>) -> Vec<SecondPoint> {
    let Some((&last, _)) = per_second.last_key_value() else {
        return Vec::new();
    };
    (0..=last)
        .map(|second| {
            let (messages, bytes) = per_second.get(&second).copied().unwrap_or((0, 0));
            SecondPoint { second, messages, bytes }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_samples_in_one_second() {
        let m = Metrics::new();
        m.register("p");
        for _ in 0..100 {
            m.record(Sample::Throughput(ThroughputSample {
                component: "p".into(),
                second: 0,
                messages: 1,
                bytes: 1024,
            }))
            .unwrap();
        }
        let s = m.snapshot("p").unwrap();
        assert_eq!(s.series, vec![SecondPoint { second: 0, messages: 100, bytes: 102_400 }]);
    }

    #[test]
    fn empty_snapshot_is_zeroed() {
        let m = Metrics::new();
        m.register("idle");
        let s = m.snapshot("idle").unwrap();
        assert!(s.series.is_empty());
        assert_eq!(s.latency, Summary::default());
        assert!(matches!(m.snapshot("ghost"), Err(MetricsError::UnknownComponent(_))));
        assert!(m.record_messages("ghost", 1, 1).is_err());
    }

    #[test]
    fn p95_nearest_rank() {
        let m = Metrics::new();
        m.register("c");
        m.record_latencies("c", 1000, (1..=100).map(|l| 1000 - l)).unwrap();
        let lat = m.snapshot("c").unwrap().latency;
        // oracle: sorted 1..=100, rank ceil(0.95*100) = 95
        let sorted: Vec<u64> = (1..=100).collect();
        let rank = (0.95f64 * 100.0).ceil() as usize;
        assert_eq!(lat.p95, sorted[rank - 1] as f64);
        assert_eq!(lat.p95, 95.0);
        assert_eq!(lat.p50, 50.0);
        assert_eq!(lat.max, 100.0);
        assert!((lat.mean - 50.5).abs() < 1e-12);
    }

    #[test]
    fn series_is_dense_to_last_second() {
        let m = Metrics::new();
        m.register("c");
        for second in [0, 3] {
            m.record(Sample::Throughput(ThroughputSample { component: "c".into(), second, messages: 2, bytes: 4 }))
                .unwrap();
        }
        let s = m.snapshot("c").unwrap();
        assert_eq!(s.series.len(), 4);
        assert_eq!(s.total_messages, 4);
        assert_eq!(s.series[1].messages, 0);
    }

    #[test]
    fn export_is_deterministic_and_header_only_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        let m = Metrics::new();
        let files = m.export_csv(dir.path()).unwrap();
        for f in &files {
            let body = fs::read_to_string(f).unwrap();
            assert_eq!(body.lines().count(), 1, "{}", f.display());
        }
        m.register("c");
        m.record_messages("c", 3, 30).unwrap();
        m.record_pilot(PilotRow { pilot_id: "p-1".into(), service_type: "broker".into(), workers: 1, startup_ms: 0.5 });
        m.export_csv(dir.path()).unwrap();
        let first: Vec<String> = files.iter().map(|f| fs::read_to_string(f).unwrap()).collect();
        m.export_csv(dir.path()).unwrap();
        let second: Vec<String> = files.iter().map(|f| fs::read_to_string(f).unwrap()).collect();
        assert_eq!(first, second);
        assert!(first[2].contains("p-1,broker,1,0.500"));
    }
}
