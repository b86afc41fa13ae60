//! Pixel metrics against ground truth, threshold sweeps, Otsu thresholds on
//! activation maps, line profiles and activation export.
//!
//! Particle pixels are the positive class. Metrics over several images are
//! micro-averaged: counts are pooled first, then turned into ratios.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::filters::{self, FilterError};
use crate::nn::{softmax_channels, Mode, NnError, Real, Tensor};
use crate::models::Network;
use crate::pgm::{self, BitDepth, ImageError};
use crate::raster::{ensure_same_dims, BinaryMask, GrayImage};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("thresholds must be ascending")]
    Unsorted,
    #[error("point ({0}, {1}) lies outside the image")]
    OutOfBounds(f64, f64),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PixelMetrics {
    /// Ratios with zero denominators defined as 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    /// Fraction of pixels classified correctly.
    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }

    /// Pools counts with another set and recomputes the ratios.
    pub fn merge(&self, other: &Self) -> Self {
        Self::from_counts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn_ + other.fn_,
            self.tn + other.tn,
        )
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<PixelMetrics, EvalError> {
    ensure_same_dims(pred.dims(), truth.dims())?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(PixelMetrics::from_counts(tp, fp, fn_, tn))
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(EvalError::Threshold(t))
    }
}

/// `prob > t`, strictly.
pub fn apply_threshold(prob: &GrayImage, t: f64) -> Result<BinaryMask, EvalError> {
    check_threshold(t)?;
    let (w, h) = prob.dims();
    Ok(BinaryMask::from_fn(w, h, |x, y| prob.get(x, y) > t))
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f64>,
    pub metrics: Vec<PixelMetrics>,
}

impl ThresholdSweep {
    /// `threshold,tp,fp,fn,tn,precision,recall,f1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,tp,fp,fn,tn,precision,recall,f1\n");
        for (t, m) in self.thresholds.iter().zip(&self.metrics) {
            let _ = writeln!(
                out,
                "{t:.4},{},{},{},{},{:.6},{:.6},{:.6}",
                m.tp, m.fp, m.fn_, m.tn, m.precision, m.recall, m.f1
            );
        }
        out
    }

    /// Row with the highest F1; the lowest threshold wins ties.
    pub fn best_f1(&self) -> Option<(f64, PixelMetrics)> {
        let mut best: Option<(f64, PixelMetrics)> = None;
        for (&t, m) in self.thresholds.iter().zip(&self.metrics) {
            if best.is_none_or(|(_, b)| m.f1 > b.f1) {
                best = Some((t, *m));
            }
        }
        best
    }

    pub fn at(&self, t: f64) -> Option<&PixelMetrics> {
        self.thresholds.iter().position(|&x| x == t).map(|i| &self.metrics[i])
    }
}

fn check_sorted(thresholds: &[f64]) -> Result<(), EvalError> {
    thresholds.iter().try_for_each(|&t| check_threshold(t))?;
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(EvalError::Unsorted);
    }
    Ok(())
}

pub fn sweep(prob: &GrayImage, truth: &BinaryMask, thresholds: &[f64]) -> Result<ThresholdSweep, EvalError> {
    pooled_sweep(&[prob.clone()], &[truth], thresholds)
}

/// Sweep over an image set with pixel counts pooled per threshold.
pub fn pooled_sweep(probs: &[GrayImage], truths: &[&BinaryMask], thresholds: &[f64]) -> Result<ThresholdSweep, EvalError> {
    check_sorted(thresholds)?;
    if probs.len() != truths.len() {
        return Err(EvalError::Argument(format!(
            "{} probability maps for {} masks",
            probs.len(),
            truths.len()
        )));
    }
    let mut metrics = vec![PixelMetrics::default(); thresholds.len()];
    for (prob, truth) in probs.iter().zip(truths) {
        for (m, &t) in metrics.iter_mut().zip(thresholds) {
            *m = m.merge(&confusion(&apply_threshold(prob, t)?, truth)?);
        }
    }
    Ok(ThresholdSweep {
        thresholds: thresholds.to_vec(),
        metrics,
    })
}

pub fn pooled_confusion_at(probs: &[GrayImage], truths: &[&BinaryMask], t: f64) -> Result<PixelMetrics, EvalError> {
    Ok(pooled_sweep(probs, truths, &[t])?.metrics[0])
}

/// Otsu's threshold on a softmax map.
pub fn otsu_on_activation(prob: &GrayImage) -> Result<f64, EvalError> {
    Ok(filters::otsu_threshold(prob, 256)?)
}

/// A fixed threshold or a per-image Otsu threshold; parses from a number
/// or the word `otsu`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdChoice {
    Fixed(f64),
    Otsu,
}

impl ThresholdChoice {
    pub fn resolve(&self, prob: &GrayImage) -> Result<f64, EvalError> {
        match *self {
            ThresholdChoice::Fixed(t) => {
                check_threshold(t)?;
                Ok(t)
            }
            ThresholdChoice::Otsu => otsu_on_activation(prob),
        }
    }
}

impl FromStr for ThresholdChoice {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("otsu") {
            return Ok(ThresholdChoice::Otsu);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| EvalError::Argument(format!("threshold `{s}` is neither a number nor `otsu`")))?;
        check_threshold(t)?;
        Ok(ThresholdChoice::Fixed(t))
    }
}

/// Bilinear samples at `samples` evenly spaced points from `p0` to `p1`
/// inclusive; points are `(x, y)` in pixel-center coordinates.
pub fn line_profile(img: &GrayImage, p0: (f64, f64), p1: (f64, f64), samples: usize) -> Result<Vec<f64>, EvalError> {
    if samples < 2 {
        return Err(EvalError::Argument(format!("a profile needs at least 2 samples, got {samples}")));
    }
    let (w, h) = img.dims();
    for (x, y) in [p0, p1] {
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return Err(EvalError::OutOfBounds(x, y));
        }
    }
    Ok((0..samples)
        .map(|i| {
            let s = i as f64 / (samples - 1) as f64;
            bilinear(img, p0.0 + s * (p1.0 - p0.0), p0.1 + s * (p1.1 - p0.1))
        })
        .collect())
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = img.dims();
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
    let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// `s,<name>...` with `s` the distance from `p0` along the line.
pub fn profile_csv(p0: (f64, f64), p1: (f64, f64), columns: &[(&str, Vec<f64>)]) -> Result<String, EvalError> {
    let n = columns.first().map(|c| c.1.len()).unwrap_or(0);
    if columns.iter().any(|c| c.1.len() != n) || n < 2 {
        return Err(EvalError::Argument("profile columns differ in length".into()));
    }
    let len = ((p1.0 - p0.0).powi(2) + (p1.1 - p0.1).powi(2)).sqrt();
    let mut out = String::from("s");
    for (name, _) in columns {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..n {
        let _ = write!(out, "{:.6}", len * i as f64 / (n - 1) as f64);
        for (_, col) in columns {
            let _ = write!(out, ",{:.9}", col[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Raw per-class logits and the particle softmax for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub background: GrayImage,
    pub particle: GrayImage,
    pub softmax: GrayImage,
}

/// Min/max used to scale one map into PGM range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Activations {
    /// Writes `<stem>_background.pgm`, `<stem>_particle.pgm` (min-max
    /// normalized), `<stem>_softmax.pgm` (unscaled) and the normalization
    /// constants as `<stem>_activations.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        let mut sidecar = serde_json::Map::new();
        for (name, img) in [("background", &self.background), ("particle", &self.particle)] {
            let (min, max) = img.min_max();
            pgm::write_pgm(&crate::raster::normalize(img), dir.join(format!("{stem}_{name}.pgm")), BitDepth::Sixteen)?;
            sidecar.insert(name.into(), serde_json::to_value(Normalization { min, max })?);
        }
        pgm::write_pgm(&self.softmax, dir.join(format!("{stem}_softmax.pgm")), BitDepth::Sixteen)?;
        sidecar.insert("softmax".into(), serde_json::to_value(Normalization { min: 0.0, max: 1.0 })?);
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(sidecar))?;
        std::fs::write(dir.join(format!("{stem}_activations.json")), text).map_err(ImageError::Io)?;
        Ok(())
    }
}

/// Eval-mode forward of one (already preprocessed) image.
pub fn export_activations<T: Real>(net: &mut Network<T>, img: &GrayImage) -> Result<Activations, EvalError> {
    let x = Tensor::<T>::from_images([img])?;
    let logits = net.forward(&x, Mode::Eval)?;
    if logits.c() != 2 {
        return Err(EvalError::Argument(format!("network produced {} channels", logits.c())));
    }
    let probs = softmax_channels(&logits)?;
    Ok(Activations {
        background: logits.channel_image(0, 0),
        particle: logits.channel_image(0, 1),
        softmax: probs.channel_image(0, 1),
    })
}

/// Particle-channel softmax for each image, one forward per image.
pub fn predict_particle_probs<T: Real>(net: &mut Network<T>, inputs: &[GrayImage]) -> Result<Vec<GrayImage>, EvalError> {
    inputs
        .iter()
        .map(|img| export_activations(net, img).map(|a| a.softmax))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_shallow, build_unet, ShallowSpec, UNetSpec};
    use crate::nn::Activation;

    #[test]
    fn confusion_examples() {
        let truth = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 2);
        let m = confusion(&truth, &truth).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = confusion(&BinaryMask::new(4, 4), &truth).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));

        // truth at (0,0),(1,0),(0,1); prediction at (0,0),(1,0),(3,3)
        let truth = BinaryMask::from_fn(4, 4, |x, y| (x, y) == (0, 0) || (x, y) == (1, 0) || (x, y) == (0, 1));
        let pred = BinaryMask::from_fn(4, 4, |x, y| (x, y) == (0, 0) || (x, y) == (1, 0) || (x, y) == (3, 3));
        let m = confusion(&pred, &truth).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 1, 1, 12));
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!(confusion(&pred, &BinaryMask::new(3, 4)).is_err());
    }

    #[test]
    fn threshold_examples() {
        let prob = GrayImage::from_rows(&[&[0.45, 1.0, 1e-9]]).unwrap();
        assert_eq!(apply_threshold(&prob, 1.0).unwrap().count(), 0);
        assert_eq!(apply_threshold(&prob, 0.0).unwrap().count(), 3);
        assert!(apply_threshold(&prob, 0.4).unwrap().get(0, 0));
        assert!(!apply_threshold(&prob, 0.7).unwrap().get(0, 0));
        assert!(apply_threshold(&prob, 1.5).is_err());
    }

    #[test]
    fn sweep_examples() {
        let truth = BinaryMask::from_fn(8, 8, |x, y| x + y < 6);
        let prob = GrayImage::from_fn(8, 8, |x, y| if truth.get(x, y) { 0.99 } else { 0.01 });
        let s = sweep(&prob, &truth, &default_thresholds()).unwrap();
        assert_eq!(s.thresholds.len(), 19);
        assert!(s.metrics.iter().all(|m| m.f1 == 1.0));
        assert_eq!(s.to_csv().lines().count(), 20);
        let single = sweep(&prob, &truth, &[0.7]).unwrap();
        assert_eq!(single.metrics[0], confusion(&apply_threshold(&prob, 0.7).unwrap(), &truth).unwrap());
        assert!(matches!(sweep(&prob, &truth, &[0.5, 0.2]), Err(EvalError::Unsorted)));
        assert_eq!(s.best_f1().unwrap().0, 0.05);
    }

    #[test]
    fn otsu_on_bimodal_activation() {
        let prob = GrayImage::from_fn(20, 20, |x, y| {
            let wobble = ((x * 7 + y * 3) % 5) as f64 * 0.01;
            if x < 6 {
                0.88 + wobble
            } else {
                0.03 + wobble
            }
        });
        let t = otsu_on_activation(&prob).unwrap();
        let truth = BinaryMask::from_fn(20, 20, |x, _| x < 6);
        assert_eq!(confusion(&apply_threshold(&prob, t).unwrap(), &truth).unwrap().f1, 1.0, "{t}");
        assert!(otsu_on_activation(&GrayImage::filled(4, 4, 0.5)).is_err());
        assert_eq!("otsu".parse::<ThresholdChoice>().unwrap(), ThresholdChoice::Otsu);
        assert_eq!("0.7".parse::<ThresholdChoice>().unwrap(), ThresholdChoice::Fixed(0.7));
        assert!("1.2".parse::<ThresholdChoice>().is_err());
        assert!("abc".parse::<ThresholdChoice>().is_err());
    }

    #[test]
    fn otsu_moves_toward_the_narrow_class_as_background_widens() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::{Distribution, Normal};

        let threshold_for = |bg_sigma: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let bg = Normal::new(0.25, bg_sigma).unwrap();
            let fg = Normal::new(0.8, 0.02).unwrap();
            let prob = GrayImage::from_fn(100, 100, |x, _| {
                let v = if x < 80 { bg.sample(&mut rng) } else { fg.sample(&mut rng) };
                v.clamp(0.0, 1.0)
            });
            otsu_on_activation(&prob).unwrap()
        };
        let ts: Vec<f64> = [0.02, 0.05, 0.08, 0.11].iter().map(|&s| threshold_for(s)).collect();
        assert!(ts.windows(2).all(|w| w[1] > w[0]), "{ts:?}");
        assert!(ts.iter().all(|&t| t > 0.25 && t < 0.8), "{ts:?}");
    }

    #[test]
    fn profile_examples() {
        let flat = GrayImage::filled(5, 5, 0.3);
        assert!(line_profile(&flat, (0.0, 0.0), (4.0, 3.5), 7).unwrap().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let img = GrayImage::from_fn(5, 3, |x, y| (x * 10 + y) as f64);
        assert_eq!(line_profile(&img, (0.0, 2.0), (4.0, 2.0), 5).unwrap(), vec![2.0, 12.0, 22.0, 32.0, 42.0]);
        let checker = GrayImage::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let p = line_profile(&checker, (0.0, 0.0), (1.0, 1.0), 3).unwrap();
        assert_eq!(p[1], 0.5);
        assert!(matches!(line_profile(&img, (0.0, 0.0), (4.5, 0.0), 3), Err(EvalError::OutOfBounds(..))));
        assert!(line_profile(&img, (0.0, 0.0), (1.0, 0.0), 1).is_err());
        let csv = profile_csv((0.0, 0.0), (3.0, 4.0), &[("raw", vec![1.0, 2.0]), ("model", vec![0.1, 0.2])]).unwrap();
        assert_eq!(csv.lines().next(), Some("s,raw,model"));
        assert!(csv.lines().nth(2).unwrap().starts_with("5.000000,"));
    }

    #[test]
    fn zero_head_activations() {
        let spec = UNetSpec {
            steps: 2,
            batch_norm: false,
            activation: Activation::LeakyRelu,
            ..Default::default()
        };
        let img = GrayImage::from_fn(16, 16, |x, y| ((x * y) % 7) as f64 / 7.0);
        let mut net = build_unet::<f64>(&spec, 0).unwrap();
        net.zero_head();
        let a = export_activations(&mut net, &img).unwrap();
        assert!(a.background.data().iter().chain(a.particle.data()).all(|&v| v == 0.0));
        assert!(a.softmax.data().iter().all(|&v| v == 0.5));

        let mut net = build_shallow::<f64>(&ShallowSpec::default(), 4).unwrap();
        let a = export_activations(&mut net, &img).unwrap();
        for ((&b, &p), &s) in a.background.data().iter().zip(a.particle.data()).zip(a.softmax.data()) {
            let recomputed = 1.0 / (1.0 + (b - p).exp());
            assert!((s - recomputed).abs() < 1e-12);
        }
    }
}
