//! Synthetic message sources: rate-limited producers that fill a broker
//! topic with clustered point sets or replayed template payloads.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError, Target};
use crate::clock;
use crate::masa::{default_detector_bins, format_points, radon_forward, shepp_logan, uniform_angles, PointBatch};
use crate::metrics::{Metrics, ProducerRow};

pub const PRODUCER_COMPONENT: &str = "producer";

#[derive(Debug, Error)]
pub enum MassError {
    #[error("invalid source config: {0}")]
    InvalidConfig(String),
    #[error("unknown scenario `{0}` (expected kmeans-random, kmeans-static, light-mt or light-cms)")]
    UnknownScenario(String),
    #[error("cannot read template {path}: {source}")]
    Template { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSourceConfig {
    pub num_centroids: usize,
    pub points_per_message: usize,
    pub dims: usize,
    #[serde(default = "default_spread")]
    pub centroid_spread: f64,
    #[serde(default = "default_stddev")]
    pub point_stddev: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_spread() -> f64 {
    10.0
}

fn default_stddev() -> f64 {
    1.0
}

impl ClusterSourceConfig {
    pub fn new(num_centroids: usize, points_per_message: usize, dims: usize, seed: u64) -> Self {
        ClusterSourceConfig {
            num_centroids,
            points_per_message,
            dims,
            centroid_spread: default_spread(),
            point_stddev: default_stddev(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), MassError> {
        let bad = |m: &str| Err(MassError::InvalidConfig(m.to_string()));
        if self.num_centroids == 0 || self.points_per_message == 0 || self.dims == 0 {
            return bad("num_centroids, points_per_message and dims must be at least 1");
        }
        if !(self.centroid_spread >= 0.0 && self.centroid_spread.is_finite()) {
            return bad("centroid_spread must be a non-negative number");
        }
        if !(self.point_stddev >= 0.0 && self.point_stddev.is_finite()) {
            return bad("point_stddev must be a non-negative number");
        }
        Ok(())
    }

    /// Centroids uniform in `[-spread, spread]^d`, fixed by `seed`.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.centroid_spread;
        (0..self.num_centroids)
            .map(|_| (0..self.dims).map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 }).collect())
            .collect()
    }

    /// Independent generator stream for one producer.
    pub fn rng_for(&self, producer: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(producer as u64 + 1);
        rng
    }
}

/// One message of `points_per_message` points, each a Gaussian draw around a
/// uniformly chosen centroid.
pub fn generate_cluster_message(config: &ClusterSourceConfig, centroids: &[Vec<f64>], rng: &mut impl RngCore) -> Vec<u8> {
    let noise = Normal::new(0.0, config.point_stddev).expect("validated stddev");
    let mut data = Vec::with_capacity(config.points_per_message * config.dims);
    for _ in 0..config.points_per_message {
        let c = &centroids[rng.random_range(0..centroids.len())];
        data.extend(c.iter().map(|x| x + noise.sample(rng)));
    }
    format_points(&PointBatch::new(config.dims, data).expect("finite points"))
}

/// A payload replayed verbatim. Exactly one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSourceConfig {
    /// Payload read from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Pseudo-random bytes of this size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<usize>,
    /// Shepp-Logan sinogram of an `image_size` image over `angles` views.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinogram: Option<SinogramTemplate>,
    /// One pre-generated cluster message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterSourceConfig>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinogramTemplate {
    pub image_size: usize,
    pub angles: usize,
}

impl SinogramTemplate {
    /// Angle count whose payload is closest to `bytes` for an `image_size` image.
    pub fn sized(image_size: usize, bytes: usize) -> Self {
        let row = 8 * (default_detector_bins(image_size) + 1);
        SinogramTemplate { image_size, angles: ((bytes.saturating_sub(8) + row / 2) / row).max(2) }
    }

    pub fn payload(&self) -> Vec<u8> {
        let n = self.image_size;
        radon_forward(&shepp_logan(n), &uniform_angles(self.angles), default_detector_bins(n))
            .expect("at least one angle")
            .to_payload()
    }
}

impl TemplateSourceConfig {
    pub fn synthetic(size_bytes: usize, seed: u64) -> Self {
        TemplateSourceConfig { size_bytes: Some(size_bytes), seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), MassError> {
        let set = [self.path.is_some(), self.size_bytes.is_some(), self.sinogram.is_some(), self.cluster.is_some()];
        if set.iter().filter(|s| **s).count() != 1 {
            return Err(MassError::InvalidConfig(
                "template needs exactly one of path, size_bytes, sinogram, cluster".into(),
            ));
        }
        if let Some(c) = &self.cluster {
            c.validate()?;
        }
        if let Some(s) = &self.sinogram {
            if s.image_size == 0 || s.angles < 2 {
                return Err(MassError::InvalidConfig("sinogram template needs image_size >= 1 and angles >= 2".into()));
            }
        }
        Ok(())
    }

    pub fn payload(&self) -> Result<Bytes, MassError> {
        self.validate()?;
        if let Some(path) = &self.path {
            return std::fs::read(path)
                .map(Bytes::from)
                .map_err(|source| MassError::Template { path: path.clone(), source });
        }
        if let Some(size) = self.size_bytes {
            let mut buf = vec![0u8; size];
            ChaCha8Rng::seed_from_u64(self.seed).fill_bytes(&mut buf);
            return Ok(Bytes::from(buf));
        }
        if let Some(s) = &self.sinogram {
            return Ok(Bytes::from(s.payload()));
        }
        let c = self.cluster.as_ref().expect("validated");
        Ok(Bytes::from(generate_cluster_message(c, &c.centroids(), &mut c.rng_for(0))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Cluster(ClusterSourceConfig),
    Template(TemplateSourceConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub topic: String,
    #[serde(default = "one")]
    pub producers: usize,
    /// Aggregate messages per second; unlimited when unset.
    #[serde(default)]
    pub target_rate: Option<f64>,
    #[serde(default)]
    pub total_messages: Option<u64>,
    #[serde(default)]
    pub duration_s: Option<f64>,
    pub source: SourceKind,
}

fn one() -> usize {
    1
}

impl SourceConfig {
    pub fn new(topic: &str, source: SourceKind) -> Self {
        SourceConfig { topic: topic.to_string(), producers: 1, target_rate: None, total_messages: None, duration_s: None, source }
    }

    pub fn validate(&self) -> Result<(), MassError> {
        let bad = |m: &str| Err(MassError::InvalidConfig(m.to_string()));
        if self.producers == 0 {
            return bad("producers must be at least 1");
        }
        match (self.total_messages, self.duration_s) {
            (Some(_), None) => {}
            (None, Some(d)) if d > 0.0 && d.is_finite() => {}
            (None, Some(_)) => return bad("duration_s must be positive"),
            _ => return bad("exactly one of total_messages and duration_s must be set"),
        }
        if let Some(r) = self.target_rate {
            if !(r > 0.0 && r.is_finite()) {
                return bad("target_rate must be positive");
            }
        }
        match &self.source {
            SourceKind::Cluster(c) => c.validate(),
            SourceKind::Template(t) => t.validate(),
        }
    }
}

/// The four benchmark presets, each stopping after `duration_s`.
pub fn make_scenario(name: &str, topic: &str, duration_s: f64) -> Result<SourceConfig, MassError> {
    let kmeans = ClusterSourceConfig::new(10, 5000, 3, 42);
    let source = match name {
        "kmeans-random" => SourceKind::Cluster(kmeans),
        "kmeans-static" => SourceKind::Template(TemplateSourceConfig { cluster: Some(kmeans), ..Default::default() }),
        "light-mt" => SourceKind::Template(TemplateSourceConfig::synthetic(2_000_000, 7)),
        "light-cms" => SourceKind::Template(TemplateSourceConfig::synthetic(18_000_000, 7)),
        other => return Err(MassError::UnknownScenario(other.to_string())),
    };
    let mut cfg = SourceConfig::new(topic, source);
    cfg.producers = 8;
    cfg.duration_s = Some(duration_s);
    Ok(cfg)
}

pub const SCENARIOS: [&str; 4] = ["kmeans-random", "kmeans-static", "light-mt", "light-cms"];

/// 8 MB frames at 10 per minute.
pub fn cms_preset(topic: &str, duration_s: f64) -> SourceConfig {
    let mut cfg = SourceConfig::new(topic, SourceKind::Template(TemplateSourceConfig::synthetic(8_000_000, 11)));
    cfg.target_rate = Some(10.0 / 60.0);
    cfg.duration_s = Some(duration_s);
    cfg
}

/// Token bucket holding at most `capacity` tokens, refilled continuously at
/// `rate` per second. Starts with one token.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate: f64, capacity: f64, now: Instant) -> Self {
        TokenBucket { rate, capacity: capacity.max(1.0), tokens: 1.0, last: now }
    }

    /// Bucket for one of `producers` sharing `rate`; burst is one second of
    /// that producer's share.
    pub fn for_share(rate: f64, producers: usize, now: Instant) -> Self {
        let share = rate / producers as f64;
        Self::new(share, share, now)
    }

    fn refill(&mut self, now: Instant) {
        let dt = now.saturating_duration_since(self.last).as_secs_f64();
        self.tokens = (self.tokens + dt * self.rate).min(self.capacity);
        self.last = now.max(self.last);
    }

    /// Takes a token if one is available at `now`; otherwise returns how long
    /// to wait for the next one.
    pub fn try_take(&mut self, now: Instant) -> Result<(), Duration> {
        self.refill(now);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Ok(())
        } else {
            let nanos = ((1.0 - self.tokens) / self.rate * 1e9).ceil();
            Err(Duration::from_nanos((nanos as u64).max(1)))
        }
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProductionReport {
    pub messages: u64,
    pub bytes: u64,
    pub elapsed_s: f64,
    /// Per-producer totals.
    pub per_producer: Vec<u64>,
    /// Per second since the run started, per producer.
    pub per_second: Vec<ProducerRow>,
    /// Send times in ms since the run started, sorted.
    pub send_times_ms: Vec<f64>,
    /// Achieved rate stayed under 95% of target for more than 3 consecutive
    /// whole seconds.
    pub saturated: bool,
}

impl ProductionReport {
    pub fn messages_per_second(&self) -> f64 {
        if self.elapsed_s > 0.0 {
            self.messages as f64 / self.elapsed_s
        } else {
            0.0
        }
    }

    pub fn megabytes_per_second(&self) -> f64 {
        if self.elapsed_s > 0.0 {
            self.bytes as f64 / 1e6 / self.elapsed_s
        } else {
            0.0
        }
    }

    /// Aggregate messages for each whole second of the run.
    pub fn totals_by_second(&self) -> Vec<u64> {
        let whole = self.elapsed_s.floor() as usize;
        let mut out = vec![0u64; whole];
        for r in &self.per_second {
            if let Some(slot) = out.get_mut(r.second as usize) {
                *slot += r.messages;
            }
        }
        out
    }
}

/// True if `achieved` falls below 95% of `target` for more than 3 seconds in a
/// row.
pub fn is_saturated(per_second: &[u64], target: f64) -> bool {
    let mut run = 0;
    for &m in per_second {
        if (m as f64) < 0.95 * target {
            run += 1;
            if run > 3 {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

enum Payloads {
    Cluster { config: ClusterSourceConfig, centroids: Vec<Vec<f64>> },
    Template(Bytes),
}

/// Runs `config.producers` producers until the stop condition or `stop` is
/// raised. Each message carries its creation time as event time. Producers
/// interleave over partitions, so with `producers` dividing the partition
/// count each partition has a single writer and a reproducible byte stream.
pub fn run_producers(
    broker: &Broker,
    config: &SourceConfig,
    metrics: &Metrics,
    stop: Option<&AtomicBool>,
) -> Result<ProductionReport, MassError> {
    config.validate()?;
    let partitions = broker.topic_config(&config.topic)?.partitions;
    let payloads = match &config.source {
        SourceKind::Cluster(c) => Payloads::Cluster { config: c.clone(), centroids: c.centroids() },
        SourceKind::Template(t) => Payloads::Template(t.payload()?),
    };
    metrics.register(PRODUCER_COMPONENT);
    let started = Instant::now();
    let metrics_second0 = metrics.current_second();
    let deadline = config.duration_s.map(|d| started + Duration::from_secs_f64(d));
    let quota = |i: usize| {
        config.total_messages.map(|t| {
            let p = config.producers as u64;
            t / p + u64::from((i as u64) < t % p)
        })
    };
    let failed = AtomicBool::new(false);

    let results: Vec<Result<ProducerLog, MassError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.producers)
            .map(|i| {
                let payloads = &payloads;
                let failed = &failed;
                s.spawn(move || {
                    let mut log = ProducerLog::default();
                    let mut bucket = config.target_rate.map(|r| TokenBucket::for_share(r, config.producers, started));
                    let mut rng = match payloads {
                        Payloads::Cluster { config, .. } => Some(config.rng_for(i)),
                        Payloads::Template(_) => None,
                    };
                    let limit = quota(i);
                    loop {
                        if limit.is_some_and(|l| log.sent.len() as u64 >= l)
                            || failed.load(Ordering::Relaxed)
                            || stop.is_some_and(|f| f.load(Ordering::Relaxed))
                        {
                            break;
                        }
                        if let Some(b) = bucket.as_mut() {
                            match b.try_take(Instant::now()) {
                                Ok(()) => {}
                                Err(wait) => {
                                    // wake at the deadline or for a stop request, whichever comes first
                                    let mut until = Instant::now() + wait;
                                    if let Some(d) = deadline {
                                        until = until.min(d);
                                    }
                                    let nap = until.saturating_duration_since(Instant::now()).min(Duration::from_millis(50));
                                    std::thread::sleep(nap);
                                    if deadline.is_some_and(|d| Instant::now() >= d) {
                                        break;
                                    }
                                    continue;
                                }
                            }
                        }
                        if deadline.is_some_and(|d| Instant::now() >= d) {
                            break;
                        }
                        let payload = match payloads {
                            Payloads::Cluster { config, centroids } => {
                                Bytes::from(generate_cluster_message(config, centroids, rng.as_mut().expect("cluster rng")))
                            }
                            Payloads::Template(t) => t.clone(),
                        };
                        let len = payload.len() as u64;
                        let event_time = clock::now_ms();
                        let at = started.elapsed();
                        // message k of producer i goes to partition (i + k * producers) mod partitions
                        let k = log.sent.len() as u64;
                        let partition = ((i as u64 + k * config.producers as u64) % partitions as u64) as u32;
                        if let Err(e) = broker.append(&config.topic, Target::Partition(partition), payload, event_time) {
                            failed.store(true, Ordering::Relaxed);
                            return Err(e.into());
                        }
                        let _ = metrics.record_messages(PRODUCER_COMPONENT, 1, len);
                        log.sent.push((at, len, metrics.current_second()));
                    }
                    Ok(log)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("producer thread panicked")).collect()
    });
    let elapsed_s = started.elapsed().as_secs_f64();

    let mut report = ProductionReport { elapsed_s, ..Default::default() };
    let mut per_second = std::collections::BTreeMap::new();
    let mut metric_rows = std::collections::BTreeMap::new();
    for (i, r) in results.into_iter().enumerate() {
        let log = r?;
        report.per_producer.push(log.sent.len() as u64);
        for (at, len, msec) in log.sent {
            report.messages += 1;
            report.bytes += len;
            report.send_times_ms.push(at.as_secs_f64() * 1e3);
            let e = per_second.entry((at.as_secs(), i)).or_insert((0u64, 0u64));
            e.0 += 1;
            e.1 += len;
            let e = metric_rows.entry((msec.max(metrics_second0), i)).or_insert((0u64, 0u64));
            e.0 += 1;
            e.1 += len;
        }
    }
    report.send_times_ms.sort_by(f64::total_cmp);
    report.per_second = per_second
        .into_iter()
        .map(|((second, producer_id), (messages, bytes))| ProducerRow { second, producer_id, messages, bytes })
        .collect();
    for ((second, producer_id), (messages, bytes)) in metric_rows {
        metrics.record_producer(ProducerRow { second, producer_id, messages, bytes });
    }
    if let Some(rate) = config.target_rate {
        report.saturated = is_saturated(&report.totals_by_second(), rate);
    }
    Ok(report)
}

#[derive(Default)]
struct ProducerLog {
    /// (offset from start, bytes, metrics second)
    sent: Vec<(Duration, u64, u64)>,
}
