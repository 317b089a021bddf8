//! Filtered back-projection with a Ram-Lak filter applied in Fourier space.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::radon::{backproject_raw, ImageGrid, Sinogram};
use super::MasaError;

/// Reconstruction together with the unclamped estimate.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Negative values clamped to zero.
    pub image: ImageGrid,
    pub raw: ImageGrid,
}

/// Spatial Ram-Lak kernel for sample spacing `tau`, laid out circularly over
/// `len` taps.
fn ram_lak(len: usize, tau: f64) -> Vec<f64> {
    let mut h = vec![0.0; len];
    h[0] = 1.0 / (4.0 * tau * tau);
    for n in (1..len / 2).step_by(2) {
        let v = -1.0 / ((n * n) as f64 * PI * PI * tau * tau);
        h[n] = v;
        h[len - n] = v;
    }
    h
}

/// Ramp-filters every projection row. Each row is zero-padded to the next
/// power of two at least twice its length so the circular convolution equals
/// the linear one.
pub fn filter_projections(sino: &Sinogram, tau: f64) -> Sinogram {
    let d = sino.bins();
    let len = (2 * d).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);

    let mut kernel: Vec<Complex<f64>> = ram_lak(len, tau).into_iter().map(|v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut kernel);

    let scale = tau / len as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    let mut values = Vec::with_capacity(sino.values().len());
    for a in 0..sino.angles().len() {
        for (slot, v) in buf.iter_mut().zip(sino.row(a).iter().chain(std::iter::repeat(&0.0))) {
            *slot = Complex::new(*v, 0.0);
        }
        fwd.process(&mut buf);
        for (x, k) in buf.iter_mut().zip(&kernel) {
            *x *= k;
        }
        inv.process(&mut buf);
        values.extend(buf[..d].iter().map(|c| c.re * scale));
    }
    Sinogram::new(sino.angles().to_vec(), d, values).expect("shape preserved")
}

/// Reconstructs an `n × n` image from `sino`.
pub fn gridrec(sino: &Sinogram, n: usize) -> Result<Reconstruction, MasaError> {
    let a = sino.angles().len();
    if a < 2 {
        return Err(MasaError::TooFewAngles(a));
    }
    if n == 0 || sino.bins() == 0 {
        return Err(MasaError::InvalidConfig("image size and detector bins must be positive".into()));
    }
    let filtered = filter_projections(sino, 1.0 / n as f64);
    let raw = backproject_raw(&filtered, n).scaled(PI / a as f64);
    Ok(Reconstruction { image: raw.clamp_non_negative(), raw })
}
