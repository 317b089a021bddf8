//! Streaming k-means: nearest-centroid scoring and a decayed, weight-blended
//! model update driven by per-cluster sufficient statistics.
//!
//! For centroid `j` with prior weight `w`, batch mass `m` and batch sum `s`:
//!
//! ```text
//! w'        = decay * w + m
//! centroid' = (decay * w * centroid + s) / w'     (unchanged when w' = 0)
//! ```
//!
//! `decay = 1` keeps every point ever seen (exact running means), `decay = 0`
//! forgets everything but the current batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MasaError, PointBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    k: usize,
    d: usize,
    centroids: Vec<f64>,
    weights: Vec<f64>,
    decay: f64,
}

impl KMeansModel {
    /// Fresh model with zero weights.
    pub fn new(centroids: Vec<Vec<f64>>, decay: f64) -> Result<Self, MasaError> {
        let k = centroids.len();
        let d = centroids.first().map_or(0, Vec::len);
        if k == 0 || d == 0 {
            return Err(MasaError::InvalidConfig("k-means model needs at least one centroid".into()));
        }
        if centroids.iter().any(|c| c.len() != d) {
            return Err(MasaError::InvalidConfig("centroids differ in dimension".into()));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(MasaError::InvalidConfig(format!("decay {decay} outside [0, 1]")));
        }
        Ok(KMeansModel { k, d, centroids: centroids.concat(), weights: vec![0.0; k], decay })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.d..(j + 1) * self.d]
    }

    pub fn centroids(&self) -> Vec<Vec<f64>> {
        self.centroids.chunks_exact(self.d).map(<[f64]>::to_vec).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Applies one decayed update from merged batch statistics.
    pub fn apply(&self, stats: &ClusterStats) -> Result<KMeansModel, MasaError> {
        if stats.k != self.k || stats.d != self.d {
            return Err(MasaError::DimensionMismatch { expected: self.d, got: stats.d });
        }
        let mut next = self.clone();
        for j in 0..self.k {
            let kept = self.decay * self.weights[j];
            let w = kept + stats.mass[j];
            next.weights[j] = w;
            if w > 0.0 {
                for t in 0..self.d {
                    next.centroids[j * self.d + t] =
                        (kept * self.centroids[j * self.d + t] + stats.sums[j * self.d + t]) / w;
                }
            }
        }
        Ok(next)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub assignments: Vec<usize>,
    pub cost: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point by squared Euclidean distance; ties go to the
/// lowest index. `cost` sums the winning distances in point order.
pub fn kmeans_score(model: &KMeansModel, batch: &PointBatch) -> Result<Scores, MasaError> {
    if batch.dims() != model.d {
        return Err(MasaError::DimensionMismatch { expected: model.d, got: batch.dims() });
    }
    let mut assignments = Vec::with_capacity(batch.len());
    let mut cost = 0.0;
    for p in batch.rows() {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for j in 0..model.k {
            let dist = squared_distance(p, model.centroid(j));
            if dist < best_dist {
                best = j;
                best_dist = dist;
            }
        }
        assignments.push(best);
        cost += best_dist;
    }
    Ok(Scores { assignments, cost })
}

/// Per-cluster point mass and coordinate sums; additive across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    k: usize,
    d: usize,
    pub mass: Vec<f64>,
    pub sums: Vec<f64>,
}

impl ClusterStats {
    pub fn zero(k: usize, d: usize) -> Self {
        ClusterStats { k, d, mass: vec![0.0; k], sums: vec![0.0; k * d] }
    }

    pub fn accumulate(&mut self, batch: &PointBatch, assignments: &[usize]) -> Result<(), MasaError> {
        if batch.dims() != self.d {
            return Err(MasaError::DimensionMismatch { expected: self.d, got: batch.dims() });
        }
        if assignments.len() != batch.len() {
            return Err(MasaError::DimensionMismatch { expected: batch.len(), got: assignments.len() });
        }
        for (p, &j) in batch.rows().zip(assignments) {
            if j >= self.k {
                return Err(MasaError::InvalidConfig(format!("assignment {j} >= k = {}", self.k)));
            }
            self.mass[j] += 1.0;
            for (s, x) in self.sums[j * self.d..(j + 1) * self.d].iter_mut().zip(p) {
                *s += x;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ClusterStats) {
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

/// One decayed update from a scored batch.
pub fn kmeans_update(model: &KMeansModel, batch: &PointBatch, assignments: &[usize]) -> Result<KMeansModel, MasaError> {
    let mut stats = ClusterStats::zero(model.k, model.d);
    stats.accumulate(batch, assignments)?;
    model.apply(&stats)
}

/// Seeds `k` centroids from `points` with k-means++ followed by Lloyd
/// refinement, keeping the lowest-cost of `trials` seedings. Points are
/// sorted first, so the result does not depend on their arrival order.
pub fn initial_centroids(points: &PointBatch, k: usize, seed: u64, trials: usize) -> Result<Vec<Vec<f64>>, MasaError> {
    if points.is_empty() {
        return Err(MasaError::InvalidConfig("cannot seed centroids from an empty batch".into()));
    }
    let d = points.dims();
    let mut rows: Vec<&[f64]> = points.rows().collect();
    rows.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let sorted = PointBatch::new(d, rows.concat())?;

    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for trial in 0..trials.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let mut centroids: Vec<Vec<f64>> = vec![sorted.row(rng.random_range(0..sorted.len())).to_vec()];
        let mut nearest: Vec<f64> = sorted.rows().map(|p| squared_distance(p, &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = nearest.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut pick = nearest.len() - 1;
                for (i, w) in nearest.iter().enumerate() {
                    if target < *w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
                pick
            } else {
                rng.random_range(0..sorted.len())
            };
            let c = sorted.row(next).to_vec();
            for (n, p) in nearest.iter_mut().zip(sorted.rows()) {
                *n = n.min(squared_distance(p, &c));
            }
            centroids.push(c);
        }
        let mut model = KMeansModel::new(centroids, 0.0)?;
        let mut cost = f64::INFINITY;
        for _ in 0..50 {
            let scores = kmeans_score(&model, &sorted)?;
            let done = scores.cost >= cost * (1.0 - 1e-12);
            cost = scores.cost;
            // decay 0: each cluster jumps to its mean; empty clusters stay put
            model = kmeans_update(&model, &sorted, &scores.assignments)?;
            if done {
                break;
            }
        }
        let cost = kmeans_score(&model, &sorted)?.cost;
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, model.centroids()));
        }
    }
    Ok(best.expect("at least one trial").1)
}
