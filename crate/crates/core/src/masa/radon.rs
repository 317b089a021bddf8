//! Parallel-beam projection geometry.
//!
//! The `N × N` image covers a square of unit side centered on the origin
//! (pixel width `1/N`, row 0 at the top). Detector bins have the same width
//! and are centered on the rotation axis. Each pixel projects to
//! `t = x cos θ + y sin θ` and is split between the two nearest bins by
//! linear interpolation, scaled by pixel area over bin width. The
//! back-projector applies exactly the transposed weights.

use std::f64::consts::{PI, SQRT_2};

use super::MasaError;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    size: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(size: usize) -> Self {
        ImageGrid { size, pixels: vec![0.0; size * size] }
    }

    pub fn filled(size: usize, value: f64) -> Self {
        ImageGrid { size, pixels: vec![value; size * size] }
    }

    pub fn from_pixels(size: usize, pixels: Vec<f64>) -> Result<Self, MasaError> {
        if pixels.len() != size * size {
            return Err(MasaError::DimensionMismatch { expected: size * size, got: pixels.len() });
        }
        Ok(ImageGrid { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.size + col] = v;
    }

    /// Pixel center in physical coordinates.
    pub fn center_of(&self, row: usize, col: usize) -> (f64, f64) {
        let n = self.size as f64;
        ((col as f64 + 0.5) / n - 0.5, 0.5 - (row as f64 + 0.5) / n)
    }

    pub fn scaled(&self, a: f64) -> ImageGrid {
        ImageGrid { size: self.size, pixels: self.pixels.iter().map(|v| v * a).collect() }
    }

    pub fn clamp_non_negative(&self) -> ImageGrid {
        ImageGrid { size: self.size, pixels: self.pixels.iter().map(|v| v.max(0.0)).collect() }
    }

    /// Little-endian f64 pixels, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// `angles × bins` projection data, row-major by angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    angles: Vec<f64>,
    bins: usize,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(angles: Vec<f64>, bins: usize, values: Vec<f64>) -> Result<Self, MasaError> {
        if values.len() != angles.len() * bins {
            return Err(MasaError::DimensionMismatch { expected: angles.len() * bins, got: values.len() });
        }
        Ok(Sinogram { angles, bins, values })
    }

    pub fn zeros(angles: Vec<f64>, bins: usize) -> Self {
        let values = vec![0.0; angles.len() * bins];
        Sinogram { angles, bins, values }
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.bins..(a + 1) * self.bins]
    }

    /// Wire format: `u32 A, u32 D`, then `A` f64 angles, then `A·D` f64
    /// values row-major; all little-endian.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * (self.angles.len() + self.values.len()));
        out.extend_from_slice(&(self.angles.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.bins as u32).to_le_bytes());
        for v in self.angles.iter().chain(&self.values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_payload(payload: &[u8]) -> Result<Self, MasaError> {
        let bad = |m: &str| MasaError::MalformedPayload(format!("sinogram: {m}"));
        if payload.len() < 8 {
            return Err(bad("shorter than header"));
        }
        let a = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(payload[4..8].try_into().unwrap()) as usize;
        let expected = a
            .checked_mul(d)
            .and_then(|ad| ad.checked_add(a))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(8))
            .ok_or_else(|| bad("header overflows"))?;
        if payload.len() != expected {
            return Err(bad(&format!("expected {expected} bytes for {a}x{d}, got {}", payload.len())));
        }
        let floats: Vec<f64> =
            payload[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if floats.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        let values = floats[a..].to_vec();
        let mut angles = floats;
        angles.truncate(a);
        Ok(Sinogram { angles, bins: d, values })
    }
}

/// `ceil(N·√2)`, bumped by one if needed so detector and pixel centers
/// share parity (the center bin then sits on the rotation axis).
pub fn default_detector_bins(n: usize) -> usize {
    let d = (n as f64 * SQRT_2).ceil() as usize;
    if d % 2 == n % 2 {
        d
    } else {
        d + 1
    }
}

/// Largest image size whose default detector count is `bins`, if any.
pub fn image_size_for_bins(bins: usize) -> Option<usize> {
    (1..=bins).rev().find(|&n| default_detector_bins(n) == bins)
}

/// `count` angles evenly spaced over `[0, π)`.
pub fn uniform_angles(count: usize) -> Vec<f64> {
    (0..count).map(|i| PI * i as f64 / count as f64).collect()
}

/// Calls `f(pixel, bin, weight)` for every non-zero interpolation weight of
/// one angle, in pixel order.
#[inline]
fn for_each_weight(n: usize, bins: usize, angle: f64, mut f: impl FnMut(usize, usize, f64)) {
    let (sin, cos) = angle.sin_cos();
    let half = n as f64 / 2.0;
    let mid = (bins as f64 - 1.0) / 2.0;
    for r in 0..n {
        // coordinates in pixel units
        let y = half - r as f64 - 0.5;
        let base = y * sin + mid;
        for c in 0..n {
            let x = c as f64 + 0.5 - half;
            let u = x * cos + base;
            let k = u.floor();
            let frac = u - k;
            let k = k as isize;
            let pixel = r * n + c;
            if k >= 0 && (k as usize) < bins {
                f(pixel, k as usize, 1.0 - frac);
            }
            if k + 1 >= 0 && ((k + 1) as usize) < bins && frac > 0.0 {
                f(pixel, (k + 1) as usize, frac);
            }
        }
    }
}

/// Line integrals of `image` along each angle.
pub fn radon_forward(image: &ImageGrid, angles: &[f64], bins: usize) -> Result<Sinogram, MasaError> {
    if angles.is_empty() {
        return Err(MasaError::EmptyAngles);
    }
    let n = image.size;
    let scale = 1.0 / n as f64;
    let mut values = vec![0.0; angles.len() * bins];
    for (a, &theta) in angles.iter().enumerate() {
        let row = &mut values[a * bins..(a + 1) * bins];
        for_each_weight(n, bins, theta, |p, k, w| row[k] += w * image.pixels[p]);
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Sinogram { angles: angles.to_vec(), bins, values })
}

/// Unscaled back-projection: every pixel sums the interpolated detector value
/// it projects onto, over all angles.
pub fn backproject_raw(sino: &Sinogram, n: usize) -> ImageGrid {
    let mut pixels = vec![0.0; n * n];
    for (a, &theta) in sino.angles.iter().enumerate() {
        let row = sino.row(a);
        for_each_weight(n, sino.bins, theta, |p, k, w| pixels[p] += w * row[k]);
    }
    ImageGrid { size: n, pixels }
}

/// Exact adjoint of [`radon_forward`].
pub fn radon_adjoint(sino: &Sinogram, n: usize) -> ImageGrid {
    backproject_raw(sino, n).scaled(1.0 / n as f64)
}

struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

/// Modified (Toft) Shepp-Logan ellipses on the [-1, 1]² square.
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { value: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { value: -0.8, a: 0.6624, b: 0.874, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { value: -0.2, a: 0.11, b: 0.31, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { value: -0.2, a: 0.16, b: 0.41, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { value: 0.1, a: 0.21, b: 0.25, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.023, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.023, b: 0.023, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.023, b: 0.046, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

/// Modified Shepp-Logan head phantom sampled at pixel centers, scaled to fit
/// the unit-diameter field of view. Values lie in [0, 1].
pub fn shepp_logan(n: usize) -> ImageGrid {
    let mut img = ImageGrid::zeros(n);
    for r in 0..n {
        for c in 0..n {
            let (x, y) = img.center_of(r, c);
            let (x, y) = (2.0 * x, 2.0 * y);
            let mut v = 0.0;
            for e in &SHEPP_LOGAN {
                let (s, co) = e.phi_deg.to_radians().sin_cos();
                let dx = x - e.x0;
                let dy = y - e.y0;
                let u = dx * co + dy * s;
                let w = -dx * s + dy * co;
                if (u / e.a).powi(2) + (w / e.b).powi(2) <= 1.0 {
                    v += e.value;
                }
            }
            img.set(r, c, v.max(0.0));
        }
    }
    img
}

/// Uniform disc of radius `radius` (physical units) centered on the origin.
pub fn disc(n: usize, radius: f64, value: f64) -> ImageGrid {
    let mut img = ImageGrid::zeros(n);
    for r in 0..n {
        for c in 0..n {
            let (x, y) = img.center_of(r, c);
            if x * x + y * y <= radius * radius {
                img.set(r, c, value);
            }
        }
    }
    img
}

/// Root-mean-square difference, optionally restricted to pixels whose
/// centers fall inside the inscribed unit-diameter disc.
pub fn rmse(a: &ImageGrid, b: &ImageGrid, interior_only: bool) -> Result<f64, MasaError> {
    if a.size != b.size {
        return Err(MasaError::DimensionMismatch { expected: a.size, got: b.size });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..a.size {
        for c in 0..a.size {
            if interior_only {
                let (x, y) = a.center_of(r, c);
                if x * x + y * y > 0.25 {
                    continue;
                }
            }
            let d = a.get(r, c) - b.get(r, c);
            sum += d * d;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() })
}
