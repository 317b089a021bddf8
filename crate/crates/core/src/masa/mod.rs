//! Streaming analysis operators: k-means clustering and tomographic
//! reconstruction, plus the projection model used to generate and check
//! sinograms.

mod gridrec;
mod kmeans;
mod mlem;
mod operators;
mod points;
mod radon;

use thiserror::Error;

pub use gridrec::{filter_projections, gridrec, Reconstruction};
pub use kmeans::{initial_centroids, kmeans_score, kmeans_update, ClusterStats, KMeansModel, Scores};
pub use mlem::{mlem, mlem_traced, poisson_log_likelihood};
pub use operators::{register_operators, Algorithm, KMeansOperator, ReconOperator};
pub use points::{format_points, parse_points, PointBatch};
pub use radon::{
    backproject_raw, default_detector_bins, disc, image_size_for_bins, radon_adjoint, radon_forward, rmse,
    shepp_logan, uniform_angles, ImageGrid, Sinogram,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MasaError {
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no projection angles")]
    EmptyAngles,
    #[error("at least 2 angles required, got {0}")]
    TooFewAngles(usize),
    #[error("initial estimate must be strictly positive")]
    NonPositiveInitial,
}
