//! Maximum-likelihood expectation maximization for Poisson data.

use super::radon::{radon_adjoint, radon_forward, ImageGrid, Sinogram};
use super::MasaError;

/// `Σ b ln(Ax) − Ax` with `0 ln 0 = 0`; `-∞` if `b > 0` where `Ax = 0`.
pub fn poisson_log_likelihood(measured: &Sinogram, estimate: &Sinogram) -> f64 {
    measured
        .values()
        .iter()
        .zip(estimate.values())
        .map(|(&b, &ax)| {
            let b = b.max(0.0);
            if b == 0.0 {
                -ax
            } else {
                b * ax.ln() - ax
            }
        })
        .sum()
}

/// Runs `iterations` multiplicative updates from `initial` (all ones when
/// `None`). Pixels that no ray crosses stay at zero.
pub fn mlem(
    sino: &Sinogram,
    n: usize,
    iterations: usize,
    initial: Option<&ImageGrid>,
) -> Result<ImageGrid, MasaError> {
    mlem_traced(sino, n, iterations, initial, |_, _| {})
}

/// [`mlem`] that calls `observe(iteration, image)` after every update.
pub fn mlem_traced(
    sino: &Sinogram,
    n: usize,
    iterations: usize,
    initial: Option<&ImageGrid>,
    mut observe: impl FnMut(usize, &ImageGrid),
) -> Result<ImageGrid, MasaError> {
    let a = sino.angles().len();
    if a < 2 {
        return Err(MasaError::TooFewAngles(a));
    }
    if iterations == 0 || n == 0 {
        return Err(MasaError::InvalidConfig("iterations and image size must be at least 1".into()));
    }
    let mut x = match initial {
        Some(init) => {
            if init.size() != n {
                return Err(MasaError::DimensionMismatch { expected: n, got: init.size() });
            }
            if init.pixels().iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(MasaError::NonPositiveInitial);
            }
            init.clone()
        }
        None => ImageGrid::filled(n, 1.0),
    };
    let b: Vec<f64> = sino.values().iter().map(|v| v.max(0.0)).collect();
    let ones = Sinogram::new(sino.angles().to_vec(), sino.bins(), vec![1.0; b.len()])?;
    let sensitivity = radon_adjoint(&ones, n);
    for (xj, sj) in x.pixels_mut().iter_mut().zip(sensitivity.pixels()) {
        if *sj <= 0.0 {
            *xj = 0.0;
        }
    }

    for it in 0..iterations {
        let ax = radon_forward(&x, sino.angles(), sino.bins())?;
        let ratio: Vec<f64> =
            b.iter().zip(ax.values()).map(|(&bi, &axi)| if axi > 0.0 { bi / axi } else { 0.0 }).collect();
        let ratio = Sinogram::new(sino.angles().to_vec(), sino.bins(), ratio)?;
        let correction = radon_adjoint(&ratio, n);
        for ((xj, cj), sj) in x.pixels_mut().iter_mut().zip(correction.pixels()).zip(sensitivity.pixels()) {
            *xj = if *sj > 0.0 { *xj * cj / sj } else { 0.0 };
        }
        observe(it, &x);
    }
    Ok(x)
}
