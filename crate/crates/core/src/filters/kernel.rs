use std::fmt::Write as _;
use std::path::Path;

use super::FilterError;
use crate::pgm::{self, BitDepth};
use crate::raster::{normalize, GrayImage};

/// Square convolution kernel of side `2 * radius + 1`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(radius: usize, weights: Vec<f64>) -> Result<Self, FilterError> {
        let side = 2 * radius + 1;
        if weights.len() != side * side {
            return Err(FilterError::Parameter(format!(
                "radius {radius} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        Ok(Self { radius, weights })
    }

    /// Evaluates `f(dx, dy)` on the offsets `-radius..=radius`.
    pub fn from_fn(radius: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let r = radius as isize;
        let mut weights = Vec::with_capacity((2 * radius + 1).pow(2));
        for dy in -r..=r {
            for dx in -r..=r {
                weights.push(f(dx as f64, dy as f64));
            }
        }
        Self { radius, weights }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `(dx, dy)` from the center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let s = self.side();
        let mut weights = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                weights[x * s + y] = self.weights[y * s + x];
            }
        }
        Self {
            radius: self.radius,
            weights,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            radius: self.radius,
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    /// Elementwise sum; both kernels must have the same radius.
    pub fn add(&self, other: &Self) -> Result<Self, FilterError> {
        if self.radius != other.radius {
            return Err(FilterError::Parameter("kernel radii differ".into()));
        }
        Ok(Self {
            radius: self.radius,
            weights: self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Elementwise mean of equally sized kernels.
    pub fn mean(kernels: &[Kernel2D]) -> Result<Self, FilterError> {
        let first = kernels
            .first()
            .ok_or_else(|| FilterError::Parameter("mean of zero kernels".into()))?;
        let mut acc = vec![0.0; first.weights.len()];
        for k in kernels {
            if k.radius != first.radius {
                return Err(FilterError::Parameter("kernel radii differ".into()));
            }
            for (a, w) in acc.iter_mut().zip(&k.weights) {
                *a += w;
            }
        }
        let n = kernels.len() as f64;
        Ok(Self {
            radius: first.radius,
            weights: acc.into_iter().map(|a| a / n).collect(),
        })
    }

    /// One CSV row per kernel row; floats use the shortest representation
    /// that parses back to the identical value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.weights.chunks(self.side()) {
            let cells: Vec<String> = row.iter().map(|w| format!("{w:?}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, FilterError> {
        let mut weights = Vec::new();
        let mut rows = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            rows += 1;
            for cell in line.split(',') {
                let v = cell.trim().parse::<f64>().map_err(|_| {
                    FilterError::Parameter(format!("bad kernel weight {cell:?}"))
                })?;
                weights.push(v);
            }
        }
        if rows % 2 == 0 || weights.len() != rows * rows {
            return Err(FilterError::Parameter(format!(
                "kernel CSV is not an odd square ({rows} rows, {} values)",
                weights.len()
            )));
        }
        Self::new(rows / 2, weights)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), FilterError> {
        std::fs::write(path, self.to_csv()).map_err(|e| FilterError::Image(e.into()))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, FilterError> {
        let text = std::fs::read_to_string(path).map_err(|e| FilterError::Image(e.into()))?;
        Self::from_csv(&text)
    }

    /// Min-max normalized rendering for visual inspection.
    pub fn to_image(&self) -> GrayImage {
        let s = self.side();
        normalize(&GrayImage::from_vec(s, s, self.weights.clone()).expect("square kernel"))
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<(), FilterError> {
        pgm::write_pgm(&self.to_image(), path, BitDepth::Eight)?;
        Ok(())
    }
}

pub(crate) fn gaussian_weights_1d(radius: usize, sigma: f64) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Sampled isotropic Gaussian normalized to unit sum.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Result<Kernel2D, FilterError> {
    if !(sigma > 0.0) {
        return Err(FilterError::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let k = Kernel2D::from_fn(radius, |x, y| (-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
    let total = k.sum();
    Ok(k.scaled(1.0 / total))
}

/// Laplacian of Gaussian with its DC component removed so weights sum to 0.
pub fn log_kernel(radius: usize, sigma: f64) -> Result<Kernel2D, FilterError> {
    if radius < 1 {
        return Err(FilterError::Parameter("LoG radius must be >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(FilterError::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let k = Kernel2D::from_fn(radius, |x, y| {
        let q = (x * x + y * y) / (2.0 * s2);
        -1.0 / (std::f64::consts::PI * s2 * s2) * (1.0 - q) * (-q).exp()
    });
    let dc = k.sum() / k.weights.len() as f64;
    Ok(Kernel2D {
        radius,
        weights: k.weights.iter().map(|w| w - dc).collect(),
    })
}

/// Which axis the Gabor stripes run along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Stripes parallel to the x axis; the carrier oscillates along y.
    Horizontal,
    /// Stripes parallel to the y axis; the carrier oscillates along x.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaborParams {
    /// Carrier wavelength in pixels.
    pub wavelength: f64,
    /// Envelope standard deviation in pixels.
    pub sigma: f64,
    /// Carrier phase offset in radians.
    pub phase: f64,
}

impl GaborParams {
    /// Defaults scaled to the kernel radius: one carrier period across the
    /// kernel and an envelope reaching its rim.
    pub fn for_radius(radius: usize) -> Self {
        let r = radius.max(1) as f64;
        Self {
            wavelength: 2.0 * r,
            sigma: r / 2.0,
            phase: 0.0,
        }
    }
}

/// Real Gabor kernel: cosine carrier under an isotropic Gaussian envelope.
pub fn gabor(radius: usize, params: GaborParams, orientation: Orientation) -> Result<Kernel2D, FilterError> {
    if radius < 1 {
        return Err(FilterError::Parameter("gabor radius must be >= 1".into()));
    }
    if !(params.wavelength > 0.0 && params.sigma > 0.0) {
        return Err(FilterError::Parameter("gabor wavelength and sigma must be > 0".into()));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    Ok(Kernel2D::from_fn(radius, |x, y| {
        let along = match orientation {
            Orientation::Vertical => x,
            Orientation::Horizontal => y,
        };
        let envelope = (-(x * x + y * y) / (2.0 * params.sigma * params.sigma)).exp();
        envelope * (two_pi * along / params.wavelength + params.phase).cos()
    }))
}

/// Horizontal Gabor + vertical Gabor + `gaussian_weight` times a Gaussian.
pub fn composite_kernel(
    radius: usize,
    gabor_params: GaborParams,
    gaussian_sigma: f64,
    gaussian_weight: f64,
) -> Result<Kernel2D, FilterError> {
    let h = gabor(radius, gabor_params, Orientation::Horizontal)?;
    let v = gabor(radius, gabor_params, Orientation::Vertical)?;
    let g = gaussian_kernel(radius, gaussian_sigma)?;
    // put the Gaussian on the same peak scale as the Gabor pair
    let g = g.scaled(gaussian_weight / g.at(0, 0));
    h.add(&v)?.add(&g)
}

/// Pearson correlation of the flattened weights.
pub fn kernel_correlation(a: &Kernel2D, b: &Kernel2D) -> Result<f64, FilterError> {
    if a.radius != b.radius {
        return Err(FilterError::Parameter(format!(
            "kernel sizes differ: {} vs {}",
            a.side(),
            b.side()
        )));
    }
    let n = a.weights.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.weights.iter().zip(&b.weights) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = |k: &Kernel2D| k.weights.iter().map(|w| w * w).sum::<f64>() * 1e-24;
    if saa <= scale(a) || sbb <= scale(b) {
        return Err(FilterError::Degenerate("kernel has zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Gaussian, LoG and Gabor-pair kernels at `radius`, each with
/// `sigma = radius / 2`, in that order. The Gabor reference is the sum of
/// the horizontal and vertical Gabor kernels from [`GaborParams::for_radius`].
pub fn reference_kernels(radius: usize) -> Result<Vec<(&'static str, Kernel2D)>, FilterError> {
    let sigma = radius.max(1) as f64 / 2.0;
    let params = GaborParams::for_radius(radius);
    let pair = gabor(radius, params, Orientation::Horizontal)?.add(&gabor(radius, params, Orientation::Vertical)?)?;
    Ok(vec![
        ("gaussian", gaussian_kernel(radius, sigma)?),
        ("log", log_kernel(radius, sigma)?),
        ("gabor", pair),
    ])
}

/// Pearson correlation of `kernel` against every reference kernel. A
/// constant kernel yields NaN rather than an error so reports stay complete.
pub fn correlation_report(kernel: &Kernel2D) -> Result<Vec<(&'static str, f64)>, FilterError> {
    reference_kernels(kernel.radius())?
        .into_iter()
        .map(|(name, r)| match kernel_correlation(kernel, &r) {
            Ok(c) => Ok((name, c)),
            Err(FilterError::Degenerate(_)) => Ok((name, f64::NAN)),
            Err(e) => Err(e),
        })
        .collect()
}
