//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported type wraps a plain Rust core that the native tests drive
//! directly; the `#[wasm_bindgen]` layer only converts errors to strings.

use pilotstream::engine::rebalance;
use pilotstream::masa::{
    default_detector_bins, gridrec, initial_centroids, kmeans_score, kmeans_update, mlem, parse_points, radon_forward,
    rmse, shepp_logan, uniform_angles, KMeansModel, MasaError, PointBatch,
};
use pilotstream::mass::{generate_cluster_message, ClusterSourceConfig};
use pilotstream::pilot::WorkerId;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const MAX_IMAGE: usize = 256;
const MAX_ANGLES: usize = 720;

/// Phantom, its sinogram and one reconstruction of it.
#[wasm_bindgen]
pub struct Reconstructed {
    size: usize,
    bins: usize,
    angles: usize,
    phantom: Vec<f64>,
    sinogram: Vec<f64>,
    image: Vec<f64>,
    rmse: f64,
}

#[wasm_bindgen]
impl Reconstructed {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn bins(&self) -> usize {
        self.bins
    }

    #[wasm_bindgen(getter)]
    pub fn angles(&self) -> usize {
        self.angles
    }

    /// Interior-disc RMSE against the phantom.
    #[wasm_bindgen(getter)]
    pub fn rmse(&self) -> f64 {
        self.rmse
    }

    /// Row-major `size * size` pixels.
    pub fn phantom(&self) -> Vec<f64> {
        self.phantom.clone()
    }

    /// Row-major `angles * bins` values.
    pub fn sinogram(&self) -> Vec<f64> {
        self.sinogram.clone()
    }

    pub fn image(&self) -> Vec<f64> {
        self.image.clone()
    }
}

/// Simulates a Shepp-Logan scan of `size` pixels over `angles` views and
/// reconstructs it with `algorithm` (`gridrec` or `mlem`).
pub fn reconstruct_phantom(size: usize, angles: usize, algorithm: &str, iterations: usize) -> Result<Reconstructed, String> {
    if !(8..=MAX_IMAGE).contains(&size) {
        return Err(format!("image size must be in 8..={MAX_IMAGE}"));
    }
    if !(2..=MAX_ANGLES).contains(&angles) {
        return Err(format!("angle count must be in 2..={MAX_ANGLES}"));
    }
    let phantom = shepp_logan(size);
    let bins = default_detector_bins(size);
    let sino = radon_forward(&phantom, &uniform_angles(angles), bins).map_err(|e| e.to_string())?;
    let image = match algorithm {
        "gridrec" => gridrec(&sino, size).map(|r| r.image),
        "mlem" if iterations == 0 || iterations > 500 => return Err("iterations must be in 1..=500".into()),
        "mlem" => mlem(&sino, size, iterations, None),
        other => return Err(format!("unknown algorithm `{other}`")),
    }
    .map_err(|e| e.to_string())?;
    let err = rmse(&image, &phantom, true).map_err(|e| e.to_string())?;
    Ok(Reconstructed {
        size,
        bins,
        angles,
        phantom: phantom.pixels().to_vec(),
        sinogram: sino.values().to_vec(),
        image: image.pixels().to_vec(),
        rmse: err,
    })
}

#[wasm_bindgen]
pub fn reconstruct(size: usize, angles: usize, algorithm: &str, iterations: usize) -> Result<Reconstructed, String> {
    reconstruct_phantom(size, angles, algorithm, iterations)
}

/// Streaming k-means over synthetic 2-D cluster messages, one message per
/// window. The first window seeds the model.
#[wasm_bindgen]
pub struct KMeansDemo {
    source: ClusterSourceConfig,
    truth: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    k: usize,
    decay: f64,
    model: Option<KMeansModel>,
    points: Vec<f64>,
    assignments: Vec<u32>,
    cost: f64,
    windows: u32,
}

impl KMeansDemo {
    pub fn create(k: usize, clusters: usize, points_per_window: usize, decay: f64, seed: u64) -> Result<KMeansDemo, String> {
        if k == 0 || k > 64 {
            return Err("k must be in 1..=64".into());
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err("decay must be in [0, 1]".into());
        }
        if points_per_window < k || points_per_window > 100_000 {
            return Err(format!("points per window must be in {k}..=100000"));
        }
        let source = ClusterSourceConfig::new(clusters, points_per_window, 2, seed);
        source.validate().map_err(|e| e.to_string())?;
        Ok(KMeansDemo {
            truth: source.centroids(),
            rng: source.rng_for(0),
            source,
            k,
            decay,
            model: None,
            points: Vec::new(),
            assignments: Vec::new(),
            cost: 0.0,
            windows: 0,
        })
    }

    /// Processes one window and returns its cost before the update.
    pub fn advance(&mut self) -> Result<f64, MasaError> {
        let payload = generate_cluster_message(&self.source, &self.truth, &mut self.rng);
        let batch: PointBatch = parse_points(&payload)?;
        let model = match self.model.take() {
            Some(m) => m,
            None => KMeansModel::new(initial_centroids(&batch, self.k, self.source.seed, 4)?, self.decay)?,
        };
        let scores = kmeans_score(&model, &batch)?;
        self.model = Some(kmeans_update(&model, &batch, &scores.assignments)?);
        self.points = batch.as_slice().to_vec();
        self.assignments = scores.assignments.iter().map(|&a| a as u32).collect();
        self.cost = scores.cost;
        self.windows += 1;
        Ok(scores.cost)
    }
}

#[wasm_bindgen]
impl KMeansDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(k: usize, clusters: usize, points_per_window: usize, decay: f64, seed: u64) -> Result<KMeansDemo, String> {
        Self::create(k, clusters, points_per_window, decay, seed)
    }

    pub fn step(&mut self) -> Result<f64, String> {
        self.advance().map_err(|e| e.to_string())
    }

    #[wasm_bindgen(getter)]
    pub fn windows(&self) -> u32 {
        self.windows
    }

    #[wasm_bindgen(getter)]
    pub fn cost(&self) -> f64 {
        self.cost
    }

    /// Flat `x, y` pairs of the last window.
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn assignments(&self) -> Vec<u32> {
        self.assignments.clone()
    }

    /// Flat `x, y` pairs of the model centroids; empty before the first step.
    pub fn centroids(&self) -> Vec<f64> {
        self.model.as_ref().map(|m| m.centroids().concat()).unwrap_or_default()
    }

    pub fn true_centroids(&self) -> Vec<f64> {
        self.truth.concat()
    }
}

/// Worker index per partition for `workers` engine workers.
#[wasm_bindgen]
pub fn assign_partitions(partitions: u32, workers: u32) -> Vec<u32> {
    let ids: Vec<WorkerId> = (0..workers as usize).map(WorkerId).collect();
    rebalance(partitions, &ids).by_partition.iter().map(|w| w.0 as u32).collect()
}

/// Partitions whose worker changes when the pool goes from `before` to `after`.
#[wasm_bindgen]
pub fn moved_partitions(partitions: u32, before: u32, after: u32) -> u32 {
    let a = assign_partitions(partitions, before);
    let b = assign_partitions(partitions, after);
    a.iter().zip(&b).filter(|(x, y)| x != y).count() as u32
}
