//! Deterministic synthetic micrographs with exact ground truth.
//!
//! A scene is a bright, linearly tilted background carrying dark disks with
//! sigmoid rims, plus i.i.d. Gaussian noise and optional smoothing. The mask
//! marks every pixel whose center lies within a disk's hard radius.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::filters;
use crate::pgm::{self, BitDepth, ImageError};
use crate::raster::{BinaryMask, GrayImage};

/// Background level before tilt and particles.
pub const BACKGROUND_LEVEL: f64 = 0.75;

/// Rejected placements tolerated before giving up on a scene.
pub const MAX_REJECTIONS: usize = 10_000;

/// Share of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Inclusive particle count range, used when no fraction target is set.
    pub particle_count_min: usize,
    pub particle_count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Depth of a particle below the local background.
    pub particle_contrast: f64,
    /// Width of the sigmoid rim in pixels; 0 gives hard edges.
    pub edge_softness: f64,
    pub noise_sigma: f64,
    /// Background drop from the left edge to the right edge.
    pub illumination_tilt: f64,
    pub blur_sigma: f64,
    pub target_particle_fraction: Option<f64>,
    /// Minimum rim-to-rim spacing between particles, pixels.
    pub min_gap: f64,
    /// Render bright particles on a dark background instead.
    pub invert: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            particle_count_min: 5,
            particle_count_max: 15,
            radius_min: 6.0,
            radius_max: 16.0,
            particle_contrast: 0.35,
            edge_softness: 1.0,
            noise_sigma: 0.05,
            illumination_tilt: 0.1,
            blur_sigma: 0.0,
            target_particle_fraction: Some(0.15),
            min_gap: 2.0,
            invert: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.image_size < 2 {
            return bad(format!("image_size {} < 2", self.image_size));
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min) {
            return bad(format!(
                "radius range [{}, {}] must satisfy 1 <= min <= max",
                self.radius_min, self.radius_max
            ));
        }
        if 2.0 * self.radius_max >= self.image_size as f64 {
            return bad(format!(
                "radius_max {} does not fit a {} px image",
                self.radius_max, self.image_size
            ));
        }
        if self.particle_count_min > self.particle_count_max {
            return bad("particle_count_min > particle_count_max".into());
        }
        if let Some(t) = self.target_particle_fraction {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("target_particle_fraction {t} outside (0, 1)"));
            }
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("edge_softness", self.edge_softness),
            ("blur_sigma", self.blur_sigma),
            ("min_gap", self.min_gap),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} {v} < 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("seed {seed}: particle placement failed after {rejections} rejections")]
    Placement { seed: u64, rejections: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Image(ImageError::Io(e))
    }
}

/// A particle's hard geometry; `(cx, cy)` in pixel-center coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Disk {
    #[inline]
    pub fn covers(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.radius * self.radius
    }

    /// Number of integer pixel centers covered.
    pub fn pixel_area(&self) -> usize {
        let r = self.radius;
        let (y0, y1) = ((self.cy - r).floor() as i64, (self.cy + r).ceil() as i64);
        let (x0, x1) = ((self.cx - r).floor() as i64, (self.cx + r).ceil() as i64);
        let mut n = 0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                n += self.covers(x as f64, y as f64) as usize;
            }
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub seed: u64,
    /// Particles that intersect the frame, in frame coordinates.
    pub particles: Vec<Disk>,
}

/// Rasterizes the hard disks into a mask of the given size.
pub fn rasterize(disks: &[Disk], width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    for d in disks {
        let x0 = (d.cx - d.radius).floor().max(0.0) as usize;
        let y0 = (d.cy - d.radius).floor().max(0.0) as usize;
        let x1 = ((d.cx + d.radius).ceil() as i64).min(width as i64 - 1);
        let y1 = ((d.cy + d.radius).ceil() as i64).min(height as i64 - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                if d.covers(x as f64, y as f64) {
                    mask.set(x, y, true);
                }
            }
        }
    }
    mask
}

/// Generates the scene for `seed`.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<Sample, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disks = place_particles(config, seed, &mut rng)?;
    render_with(config, disks, seed, &mut rng)
}

/// Renders a scene with caller-chosen particles. Noise still comes from `seed`.
pub fn render(config: &SynthConfig, disks: Vec<Disk>, seed: u64) -> Result<Sample, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_with(config, disks, seed, &mut rng)
}

fn place_particles(config: &SynthConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Vec<Disk>, SynthError> {
    let size = config.image_size as f64;
    let total = (config.image_size * config.image_size) as f64;
    let mut disks: Vec<Disk> = Vec::new();
    let mut covered = 0usize;
    let mut rejections = 0usize;

    let wanted = match config.target_particle_fraction {
        Some(_) => usize::MAX,
        None => rng.random_range(config.particle_count_min..=config.particle_count_max),
    };

    loop {
        match config.target_particle_fraction {
            Some(t) if covered as f64 / total >= t => break,
            None if disks.len() >= wanted => break,
            _ => {}
        }
        let radius = if config.radius_max > config.radius_min {
            rng.random_range(config.radius_min..config.radius_max)
        } else {
            config.radius_min
        };
        let lo = radius;
        let hi = size - 1.0 - radius;
        let cand = Disk {
            cx: rng.random_range(lo..=hi),
            cy: rng.random_range(lo..=hi),
            radius,
        };
        let clear = disks.iter().all(|d| {
            let gap = ((d.cx - cand.cx).powi(2) + (d.cy - cand.cy).powi(2)).sqrt() - d.radius - cand.radius;
            gap >= config.min_gap
        });
        let area = cand.pixel_area();
        let fits = match config.target_particle_fraction {
            Some(t) => (covered + area) as f64 / total <= t + 0.05,
            None => true,
        };
        if clear && fits {
            covered += area;
            disks.push(cand);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(SynthError::Placement { seed, rejections });
            }
        }
    }
    Ok(disks)
}

fn render_with(
    config: &SynthConfig,
    disks: Vec<Disk>,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Sample, SynthError> {
    let n = config.image_size;
    let span = (n.max(2) - 1) as f64;
    let mut coverage = GrayImage::new(n, n);
    for d in &disks {
        // the sigmoid tail is negligible beyond eight rim widths
        let reach = d.radius + 8.0 * config.edge_softness + 1.0;
        let x0 = (d.cx - reach).floor().max(0.0) as usize;
        let y0 = (d.cy - reach).floor().max(0.0) as usize;
        let x1 = ((d.cx + reach).ceil() as usize).min(n - 1);
        let y1 = ((d.cy + reach).ceil() as usize).min(n - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let signed = ((x as f64 - d.cx).powi(2) + (y as f64 - d.cy).powi(2)).sqrt() - d.radius;
                let s = rim_profile(signed, config.edge_softness);
                if s > coverage.get(x, y) {
                    coverage.set(x, y, s);
                }
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut image = GrayImage::from_fn(n, n, |x, y| {
        BACKGROUND_LEVEL - config.illumination_tilt * x as f64 / span - config.particle_contrast * coverage.get(x, y)
    });
    if config.noise_sigma > 0.0 {
        for v in image.data_mut() {
            *v += noise.sample(rng);
        }
    }
    if config.blur_sigma > 0.0 {
        image = filters::gaussian_blur(&image, config.blur_sigma).expect("validated sigma");
    }
    let image = image.map(|v| {
        let v = v.clamp(0.0, 1.0);
        if config.invert {
            1.0 - v
        } else {
            v
        }
    });
    let mask = rasterize(&disks, n, n);
    Ok(Sample {
        image,
        mask,
        seed,
        particles: disks,
    })
}

fn rim_profile(signed_distance: f64, softness: f64) -> f64 {
    if softness <= 0.0 {
        return if signed_distance <= 0.0 { 1.0 } else { 0.0 };
    }
    1.0 / (1.0 + (signed_distance / softness).exp())
}

/// Square crop of side `crop` at a seed-chosen offset; image and mask share it.
pub fn random_crop(sample: &Sample, crop: usize, seed: u64) -> Result<Sample, SynthError> {
    let (w, h) = sample.image.dims();
    if crop == 0 || crop > w || crop > h {
        return Err(SynthError::Dimension(format!("crop {crop} exceeds {w}x{h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(0..=w - crop);
    let y0 = rng.random_range(0..=h - crop);
    crop_at(sample, x0, y0, crop)
}

pub fn crop_at(sample: &Sample, x0: usize, y0: usize, crop: usize) -> Result<Sample, SynthError> {
    let image = sample.image.crop(x0, y0, crop, crop)?;
    let mask = sample.mask.crop(x0, y0, crop, crop)?;
    let particles = shift_disks(&sample.particles, -(x0 as f64), -(y0 as f64), crop, crop);
    Ok(Sample {
        image,
        mask,
        seed: sample.seed,
        particles,
    })
}

/// Integer translation of image and mask together. Vacated image pixels
/// replicate the edge; vacated mask pixels are background.
pub fn affine_shift(sample: &Sample, dx: i64, dy: i64) -> Result<Sample, SynthError> {
    let (w, h) = sample.image.dims();
    if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
        return Err(SynthError::Dimension(format!("shift ({dx}, {dy}) too large for {w}x{h}")));
    }
    let image = GrayImage::from_fn(w, h, |x, y| {
        sample.image.get_clamped(x as isize - dx as isize, y as isize - dy as isize)
    });
    let mask = BinaryMask::from_fn(w, h, |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h && sample.mask.get(sx as usize, sy as usize)
    });
    let particles = shift_disks(&sample.particles, dx as f64, dy as f64, w, h);
    Ok(Sample {
        image,
        mask,
        seed: sample.seed,
        particles,
    })
}

fn shift_disks(disks: &[Disk], dx: f64, dy: f64, w: usize, h: usize) -> Vec<Disk> {
    disks
        .iter()
        .map(|d| Disk {
            cx: d.cx + dx,
            cy: d.cy + dy,
            radius: d.radius,
        })
        .filter(|d| {
            d.cx + d.radius >= 0.0
                && d.cy + d.radius >= 0.0
                && d.cx - d.radius <= (w - 1) as f64
                && d.cy - d.radius <= (h - 1) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of training samples out of `n`: 70 % rounded half up.
pub fn train_count(n: usize) -> usize {
    (n * 7 + 5) / 10
}

/// Shuffles `0..n` with `split_seed` and cuts it 70/30.
pub fn split_indices(n: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    idx.shuffle(&mut rng);
    let test = idx.split_off(train_count(n));
    (idx, test)
}

/// `n` scenes with seeds `split_seed..split_seed + n`, shuffled and split.
pub fn make_dataset(config: &SynthConfig, n: usize, split_seed: u64) -> Result<DatasetSplit, SynthError> {
    if n < 2 {
        return Err(SynthError::Config(format!("dataset needs at least 2 images, got {n}")));
    }
    let samples = (0..n as u64)
        .map(|i| generate(config, split_seed + i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(split_samples(samples, split_seed))
}

pub fn split_samples(samples: Vec<Sample>, split_seed: u64) -> DatasetSplit {
    let (train_idx, test_idx) = split_indices(samples.len(), split_seed);
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let take = |ids: &[usize], slots: &mut Vec<Option<Sample>>| -> Vec<Sample> {
        ids.iter().map(|&i| slots[i].take().expect("unique index")).collect()
    };
    let train = take(&train_idx, &mut slots);
    let test = take(&test_idx, &mut slots);
    DatasetSplit {
        train,
        test,
        split_seed,
    }
}

pub fn image_file_name(seed: u64) -> String {
    format!("{seed:05}.pgm")
}

pub fn mask_file_name(seed: u64) -> String {
    format!("{seed:05}_mask.pgm")
}

/// Writes `NNNNN.pgm` / `NNNNN_mask.pgm` pairs (NNNNN = seed), a
/// `manifest.csv` of `seed,split,particle_fraction` and `config.json`.
pub fn save_dataset(dir: &Path, split: &DatasetSplit, config: &SynthConfig) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let mut rows: Vec<(u64, &str, f64)> = Vec::new();
    for (samples, name) in [(&split.train, "train"), (&split.test, "test")] {
        for s in samples {
            pgm::write_pgm(&s.image, dir.join(image_file_name(s.seed)), BitDepth::Sixteen)?;
            pgm::write_mask(&s.mask, dir.join(mask_file_name(s.seed)))?;
            rows.push((s.seed, name, s.mask.fraction()));
        }
    }
    rows.sort_by_key(|r| r.0);
    let mut manifest = String::from("seed,split,particle_fraction\n");
    for (seed, name, frac) in rows {
        let _ = writeln!(manifest, "{seed},{name},{frac:?}");
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub seed: u64,
    pub train: bool,
    pub particle_fraction: f64,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>, SynthError> {
    let text = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("seed,split,particle_fraction") {
        return Err(SynthError::Dataset("manifest.csv header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            let bad = || SynthError::Dataset(format!("bad manifest row {line:?}"));
            if cells.len() != 3 {
                return Err(bad());
            }
            Ok(ManifestRow {
                seed: cells[0].parse().map_err(|_| bad())?,
                train: match cells[1] {
                    "train" => true,
                    "test" => false,
                    _ => return Err(bad()),
                },
                particle_fraction: cells[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loads a dataset directory written by [`save_dataset`]. Particle geometry
/// is not persisted, so loaded samples carry no disks.
pub fn load_dataset(dir: &Path, split_seed: u64) -> Result<DatasetSplit, SynthError> {
    let rows = read_manifest(dir)?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        split_seed,
    };
    for row in rows {
        let image = pgm::read_pgm(dir.join(image_file_name(row.seed)))?;
        let mask = pgm::read_mask(dir.join(mask_file_name(row.seed)))?;
        if image.dims() != mask.dims() {
            return Err(SynthError::Dataset(format!("seed {}: image and mask sizes differ", row.seed)));
        }
        let s = Sample {
            image,
            mask,
            seed: row.seed,
            particles: Vec::new(),
        };
        if row.train {
            split.train.push(s);
        } else {
            split.test.push(s);
        }
    }
    Ok(split)
}
