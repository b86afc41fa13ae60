use super::FilterError;
use crate::raster::GrayImage;

/// Relative tolerance under which two cut scores count as tied.
pub const OTSU_TIE_RTOL: f64 = 1e-12;

/// Equal-width histogram over the image's own `[min, max]` range.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(img: &GrayImage, bins: usize) -> Result<Self, FilterError> {
        if bins < 2 {
            return Err(FilterError::Parameter(format!("need at least 2 bins, got {bins}")));
        }
        let (lo, hi) = img.min_max();
        if !(hi > lo) {
            return Err(FilterError::Degenerate(
                "histogram of a constant image has no cut".into(),
            ));
        }
        let mut counts = vec![0u64; bins];
        let scale = bins as f64 / (hi - lo);
        for &v in img.data() {
            let b = (((v - lo) * scale) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_center(&self, bin: usize) -> f64 {
        self.lo + (bin as f64 + 0.5) * self.bin_width()
    }

    /// Upper boundary of `bin`.
    pub fn bin_upper(&self, bin: usize) -> f64 {
        self.lo + (bin + 1) as f64 * self.bin_width()
    }
}

/// Index `k` of the last bin in the lower class for the cut that minimizes
/// intra-class variance; near-ties resolve to the lowest `k`.
pub fn otsu_cut(counts: &[u64]) -> Result<usize, FilterError> {
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(FilterError::Degenerate(
            "histogram needs at least two occupied bins".into(),
        ));
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let total_sum: f64 = counts.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();

    // Minimizing within-class variance is maximizing n0 n1 (mu0 - mu1)^2.
    let mut scores = Vec::with_capacity(counts.len() - 1);
    let (mut n0, mut s0) = (0.0, 0.0);
    for (i, &c) in counts[..counts.len() - 1].iter().enumerate() {
        n0 += c as f64;
        s0 += i as f64 * c as f64;
        let n1 = total - n0;
        let score = if n0 > 0.0 && n1 > 0.0 {
            let d = s0 / n0 - (total_sum - s0) / n1;
            n0 * n1 * d * d
        } else {
            f64::NEG_INFINITY
        };
        scores.push(score);
    }
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = best - best.abs() * OTSU_TIE_RTOL;
    Ok(scores.iter().position(|&s| s >= floor).expect("best is attained"))
}

/// Otsu threshold as the upper edge of the last lower-class bin. Pixels strictly
/// above it form the upper class.
pub fn otsu_threshold(img: &GrayImage, bins: usize) -> Result<f64, FilterError> {
    let hist = Histogram::of(img, bins)?;
    let k = otsu_cut(&hist.counts)?;
    Ok(hist.bin_upper(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct scan over every cut, computing intra-class variance from the
    /// bin centers themselves.
    pub(crate) fn brute_force_cut(counts: &[u64]) -> usize {
        let centers: Vec<f64> = (0..counts.len()).map(|i| (i as f64 + 0.5) / counts.len() as f64).collect();
        let mut best: Option<(usize, f64)> = None;
        let mut all = Vec::new();
        for k in 0..counts.len() - 1 {
            let (lower, upper) = (0..=k, k + 1..counts.len());
            let n0: u64 = counts[lower.clone()].iter().sum();
            let n1: u64 = counts[upper.clone()].iter().sum();
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let mean = |r: std::ops::Range<usize>, n: u64| {
                r.map(|i| counts[i] as f64 * centers[i]).sum::<f64>() / n as f64
            };
            let m0 = mean(0..k + 1, n0);
            let m1 = mean(k + 1..counts.len(), n1);
            let within: f64 = lower.map(|i| counts[i] as f64 * (centers[i] - m0).powi(2)).sum::<f64>()
                + upper.map(|i| counts[i] as f64 * (centers[i] - m1).powi(2)).sum::<f64>();
            all.push((k, within));
            if best.is_none_or(|(_, b)| within < b) {
                best = Some((k, within));
            }
        }
        let min = best.unwrap().1;
        all.iter().find(|(_, v)| *v <= min + min.abs() * 1e-9).unwrap().0
    }

    #[test]
    fn bimodal_threshold_between_modes() {
        let img = GrayImage::from_fn(10, 10, |x, _| if x < 5 { 0.2 } else { 0.8 });
        let t = otsu_threshold(&img, 256).unwrap();
        assert!(t > 0.2 && t < 0.8, "{t}");
    }

    #[test]
    fn threshold_reproduces_histogram_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = GrayImage::from_fn(32, 32, |x, _| {
            let base = if x < 12 { 0.1 } else { 0.7 };
            base + rng.random_range(0.0..0.2)
        });
        let hist = Histogram::of(&img, 256).unwrap();
        let k = otsu_cut(&hist.counts).unwrap();
        let t = otsu_threshold(&img, 256).unwrap();
        let upper = img.data().iter().filter(|&&v| v > t).count() as u64;
        assert_eq!(upper, hist.counts[k + 1..].iter().sum::<u64>());
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = GrayImage::filled(4, 4, 0.3);
        assert!(matches!(otsu_threshold(&img, 256), Err(FilterError::Degenerate(_))));
    }

    #[test]
    fn agrees_with_brute_force_on_random_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let counts: Vec<u64> = (0..256)
                .map(|_| if rng.random_bool(0.3) { rng.random_range(0..500) } else { 0 })
                .collect();
            if counts.iter().filter(|&&c| c > 0).count() < 2 {
                continue;
            }
            assert_eq!(otsu_cut(&counts).unwrap(), brute_force_cut(&counts));
        }
    }

    #[test]
    fn invariant_under_positive_affine_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let img = GrayImage::from_fn(16, 16, |_, _| rng.random_range(0..256) as f64 / 255.0);
            let a = Histogram::of(&img, 256).unwrap();
            let scaled = img.map(|v| 2.5 * v - 0.75);
            let b = Histogram::of(&scaled, 256).unwrap();
            assert_eq!(otsu_cut(&a.counts).unwrap(), otsu_cut(&b.counts).unwrap());
        }
    }
}
