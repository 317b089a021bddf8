use std::sync::Arc;
use std::time::Instant;

use bytes::Bytes;
use parking_lot::Mutex;
use serde_json::{json, Value};

use super::{
    gridrec, image_size_for_bins, initial_centroids, kmeans_score, mlem, parse_points, rmse, shepp_logan,
    ClusterStats, KMeansModel, MasaError, PointBatch, Sinogram,
};
use crate::broker::Record;
use crate::engine::{Operator, OperatorConfig, OperatorError, OperatorRegistry, OutputRecord, PartialResult, TaskContext, Timing, WindowOutput};

/// Registers `kmeans`, `gridrec` and `mlem`.
pub fn register_operators(registry: &OperatorRegistry) {
    registry.register("kmeans", |cfg| Ok(Arc::new(KMeansOperator::from_config(cfg)?) as Arc<dyn Operator>));
    registry.register("gridrec", |cfg| {
        Ok(Arc::new(ReconOperator::from_config(Algorithm::Gridrec, cfg)?) as Arc<dyn Operator>)
    });
    registry.register("mlem", |cfg| Ok(Arc::new(ReconOperator::from_config(Algorithm::Mlem, cfg)?) as Arc<dyn Operator>));
}

fn config_err(e: impl std::fmt::Display) -> OperatorError {
    OperatorError::new(e.to_string())
}

fn get_usize(cfg: &OperatorConfig, key: &str, default: usize) -> Result<usize, OperatorError> {
    match cfg.get(key) {
        None => Ok(default),
        Some(v) => v.as_u64().map(|v| v as usize).ok_or_else(|| config_err(format!("{key} must be a non-negative integer"))),
    }
}

/// Streaming k-means over cluster-format point payloads.
///
/// Until the first non-empty window the model is unset; that window seeds
/// the centroids from all of its points, then every window (including the
/// first) scores its messages and applies one decayed update in `merge`.
pub struct KMeansOperator {
    k: usize,
    decay: f64,
    seed: u64,
    trials: usize,
    model: Mutex<Option<KMeansModel>>,
}

enum KMeansState {
    Seeding(Vec<(u64, PointBatch)>),
    Scored(ClusterStats),
}

impl KMeansOperator {
    pub fn new(k: usize, decay: f64, seed: u64) -> Result<Self, OperatorError> {
        if k == 0 {
            return Err(config_err("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(config_err("decay must lie in [0, 1]"));
        }
        Ok(KMeansOperator { k, decay, seed, trials: 4, model: Mutex::new(None) })
    }

    pub fn with_model(model: KMeansModel) -> Self {
        KMeansOperator { k: model.k(), decay: model.decay(), seed: 0, trials: 4, model: Mutex::new(Some(model)) }
    }

    /// Keys: `k` (default 10), `decay` (1.0), `seed` (0), `trials` (4) and an
    /// optional `centroids` array of arrays.
    pub fn from_config(cfg: &OperatorConfig) -> Result<Self, OperatorError> {
        let decay = match cfg.get("decay") {
            None => 1.0,
            Some(v) => v.as_f64().ok_or_else(|| config_err("decay must be a number"))?,
        };
        if let Some(c) = cfg.get("centroids") {
            let centroids: Vec<Vec<f64>> =
                serde_json::from_value(c.clone()).map_err(|e| config_err(format!("centroids: {e}")))?;
            let model = KMeansModel::new(centroids, decay).map_err(config_err)?;
            return Ok(Self::with_model(model));
        }
        let mut op = Self::new(get_usize(cfg, "k", 10)?, decay, get_usize(cfg, "seed", 0)? as u64)?;
        op.trials = get_usize(cfg, "trials", 4)?.max(1);
        Ok(op)
    }

    pub fn model(&self) -> Option<KMeansModel> {
        self.model.lock().clone()
    }

    fn score_message(model: &KMeansModel, partition: u32, offset: u64, batch: &PointBatch, stats: &mut ClusterStats) -> OutputRecord {
        let scores = kmeans_score(model, batch).expect("dimensions checked");
        stats.accumulate(batch, &scores.assignments).expect("dimensions checked");
        let mut counts = vec![0u64; model.k()];
        for &a in &scores.assignments {
            counts[a] += 1;
        }
        let data = json!({ "points": batch.len(), "cost": scores.cost, "counts": counts });
        OutputRecord { partition, offset, data: Bytes::from(data.to_string()) }
    }
}

impl Operator for KMeansOperator {
    fn name(&self) -> &str {
        "kmeans"
    }

    fn process(&self, task: &TaskContext, records: &[Record]) -> Result<PartialResult, OperatorError> {
        let model = self.model();
        let mut out = PartialResult { partition: task.partition, ..Default::default() };
        let mut parsed = Vec::with_capacity(records.len());
        for r in records {
            match parse_points(&r.payload) {
                Ok(b) if model.as_ref().is_none_or(|m| m.dims() == b.dims()) => parsed.push((r.offset, b)),
                Ok(b) => {
                    log::warn!("kmeans: partition {} offset {}: {}-d points for a {}-d model", r.partition, r.offset, b.dims(), model.as_ref().map_or(0, |m| m.dims()));
                    out.skipped += 1;
                }
                Err(e) => {
                    log::warn!("kmeans: partition {} offset {}: {e}", r.partition, r.offset);
                    out.skipped += 1;
                }
            }
        }
        let state = match model {
            None => KMeansState::Seeding(parsed),
            Some(m) => {
                let mut stats = ClusterStats::zero(m.k(), m.dims());
                for (offset, b) in &parsed {
                    out.outputs.push(Self::score_message(&m, task.partition, *offset, b, &mut stats));
                }
                KMeansState::Scored(stats)
            }
        };
        out.state = Some(Box::new(state));
        Ok(out)
    }

    fn merge(&self, window_index: u64, mut partials: Vec<PartialResult>) -> Result<WindowOutput, OperatorError> {
        let mut guard = self.model.lock();
        let mut states = Vec::with_capacity(partials.len());
        for p in &mut partials {
            let state = p.state.take().and_then(|s| s.downcast::<KMeansState>().ok());
            states.push(*state.ok_or_else(|| OperatorError::on_partition(p.partition, "missing k-means state"))?);
        }

        let seeding = states.iter().any(|s| matches!(s, KMeansState::Seeding(_)));
        let (model, stats) = if seeding {
            // Every partition saw an unset model; seed from the whole window.
            let mut messages = Vec::new();
            for (p, s) in partials.iter().zip(states) {
                match s {
                    KMeansState::Seeding(m) => messages.extend(m.into_iter().map(|(o, b)| (p.partition, o, b))),
                    KMeansState::Scored(_) => return Err(OperatorError::new("model changed during window")),
                }
            }
            if messages.is_empty() {
                return Ok(crate::engine::concat_partials(window_index, partials));
            }
            // the first message fixes the dimension
            let d = messages[0].2.dims();
            for (p, o, b) in messages.iter().filter(|(_, _, b)| b.dims() != d) {
                log::warn!("kmeans: partition {p} offset {o}: {}-d points in a {d}-d window", b.dims());
                partials.iter_mut().find(|x| x.partition == *p).expect("partition present").skipped += 1;
            }
            messages.retain(|(_, _, b)| b.dims() == d);
            let mut all = PointBatch::empty(d);
            for (_, _, b) in &messages {
                all.extend(b).map_err(config_err)?;
            }
            let centroids = initial_centroids(&all, self.k, self.seed, self.trials).map_err(config_err)?;
            let fresh = KMeansModel::new(centroids, self.decay).map_err(config_err)?;
            let mut stats = ClusterStats::zero(fresh.k(), d);
            for (p, o, b) in &messages {
                let rec = Self::score_message(&fresh, *p, *o, b, &mut stats);
                partials.iter_mut().find(|x| x.partition == *p).expect("partition present").outputs.push(rec);
            }
            (fresh, stats)
        } else {
            let current = guard.clone().ok_or_else(|| OperatorError::new("model missing after scoring"))?;
            let mut stats = ClusterStats::zero(current.k(), current.dims());
            for s in states {
                if let KMeansState::Scored(part) = s {
                    stats.merge(&part);
                }
            }
            (current, stats)
        };
        let next = model.apply(&stats).map_err(config_err)?;
        let out = crate::engine::concat_partials(window_index, partials);
        *guard = Some(next);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Gridrec,
    Mlem,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gridrec => "gridrec",
            Algorithm::Mlem => "mlem",
        }
    }
}

/// Reconstructs every sinogram message independently.
pub struct ReconOperator {
    pub algorithm: Algorithm,
    /// ML-EM iterations; ignored by gridrec.
    pub iterations: usize,
    /// Output size; derived from the detector count when unset.
    pub image_size: Option<usize>,
    /// Score each image against the Shepp-Logan phantom.
    pub compare_to_phantom: bool,
    /// Emit the image bytes (little-endian f64, row-major) as output.
    pub emit_images: bool,
}

impl ReconOperator {
    pub fn new(algorithm: Algorithm) -> Self {
        ReconOperator { algorithm, iterations: 20, image_size: None, compare_to_phantom: false, emit_images: true }
    }

    /// Keys: `iterations` (20), `image_size`, `reference` (`"shepp-logan"`)
    /// and `emit_images` (true).
    pub fn from_config(algorithm: Algorithm, cfg: &OperatorConfig) -> Result<Self, OperatorError> {
        let mut op = Self::new(algorithm);
        op.iterations = get_usize(cfg, "iterations", 20)?;
        if op.iterations == 0 {
            return Err(config_err("iterations must be at least 1"));
        }
        if cfg.contains_key("image_size") {
            op.image_size = Some(get_usize(cfg, "image_size", 0)?).filter(|n| *n > 0);
        }
        op.compare_to_phantom = match cfg.get("reference") {
            None | Some(Value::Null) => false,
            Some(Value::String(s)) if s == "shepp-logan" => true,
            Some(other) => return Err(config_err(format!("unknown reference {other}"))),
        };
        if let Some(v) = cfg.get("emit_images") {
            op.emit_images = v.as_bool().ok_or_else(|| config_err("emit_images must be a boolean"))?;
        }
        Ok(op)
    }

    fn reconstruct(&self, payload: &[u8]) -> Result<(super::ImageGrid, usize), MasaError> {
        let sino = Sinogram::from_payload(payload)?;
        let n = match self.image_size {
            Some(n) => n,
            None => image_size_for_bins(sino.bins()).ok_or_else(|| {
                MasaError::InvalidConfig(format!("no image size maps to {} detector bins", sino.bins()))
            })?,
        };
        let image = match self.algorithm {
            Algorithm::Gridrec => gridrec(&sino, n)?.image,
            Algorithm::Mlem => mlem(&sino, n, self.iterations, None)?,
        };
        Ok((image, n))
    }
}

impl Operator for ReconOperator {
    fn name(&self) -> &str {
        self.algorithm.name()
    }

    fn process(&self, task: &TaskContext, records: &[Record]) -> Result<PartialResult, OperatorError> {
        let mut out = PartialResult { partition: task.partition, ..Default::default() };
        for r in records {
            let started = Instant::now();
            match self.reconstruct(&r.payload) {
                Ok((image, n)) => {
                    let millis = started.elapsed().as_secs_f64() * 1e3;
                    let error = self.compare_to_phantom.then(|| rmse(&image, &shepp_logan(n), true).expect("same size"));
                    out.timings.push(Timing {
                        partition: r.partition,
                        offset: r.offset,
                        algorithm: self.algorithm.name().to_string(),
                        iterations: match self.algorithm {
                            Algorithm::Gridrec => 1,
                            Algorithm::Mlem => self.iterations,
                        },
                        millis,
                        rmse: error,
                    });
                    let data = if self.emit_images { Bytes::from(image.to_le_bytes()) } else { Bytes::new() };
                    out.outputs.push(OutputRecord { partition: r.partition, offset: r.offset, data });
                }
                Err(e) => {
                    log::warn!("{}: partition {} offset {}: {e}", self.algorithm.name(), r.partition, r.offset);
                    out.skipped += 1;
                }
            }
        }
        Ok(out)
    }
}
