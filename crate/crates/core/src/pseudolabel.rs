//! Automatic particle masks from classical filtering, used as training
//! labels when no hand annotation exists.
//!
//! Fixed stage order:
//!
//! 1. normalize to `[0, 1]`
//! 2. invert when particles are dark, so they become bright
//! 3. Gaussian smoothing
//! 4. background from below: reconstruction by dilation of a marker that
//!    keeps the smoothed image on the frame border and sits at its minimum
//!    everywhere else; every bright dome not touching the border is flattened.
//!    The border values are first opened along the frame perimeter, so a
//!    particle cut by the frame does not lift the background with it
//! 5. background from above: reconstruction by erosion of the dual marker;
//!    every dark basin not touching the border is filled
//! 6. residue = domes minus basins, `(f - A) - (B - f)`; with `use_sobel` it
//!    is weighted by the normalized Sobel magnitude of `f`
//! 7. threshold at `max(otsu(residue), marker_offset)`
//! 8. binary opening with a square of radius `morph_radius`
//! 9. drop 8-connected components below `min_area` pixels

use serde::{Deserialize, Serialize};

use crate::filters::{self, FilterError, MorphOp, ReconstructMode};
use crate::particles::{self, Connectivity};
use crate::raster::{ensure_same_dims, normalize, BinaryMask, GrayImage};

/// Pixel brightening used by [`overlay`].
pub const OVERLAY_OFFSET: f64 = 0.35;

/// Smallest image side the pipeline accepts.
pub const MIN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelParams {
    pub blur_sigma: f64,
    /// Smallest residue value (in normalized intensity) that can be labeled
    /// particle, whatever the Otsu cut says.
    pub marker_offset: f64,
    pub morph_radius: usize,
    /// Set when particles are darker than the background.
    pub invert: bool,
    pub min_area: usize,
    pub use_sobel: bool,
    /// Half-width (pixels) of the 1-D opening/closing applied to the border
    /// marker along the frame perimeter; bright or dark features cut by the
    /// frame and narrower than `2 * border_radius + 1` stop seeding the
    /// background. 0 uses the raw border.
    pub border_radius: usize,
}

impl Default for PseudoLabelParams {
    fn default() -> Self {
        Self {
            blur_sigma: 2.0,
            marker_offset: 0.1,
            morph_radius: 2,
            invert: true,
            min_area: 9,
            use_sobel: false,
            border_radius: 24,
        }
    }
}

impl PseudoLabelParams {
    pub fn validate(&self) -> Result<(), LabelError> {
        if !(self.blur_sigma >= 0.0) {
            return Err(LabelError::Params(format!("blur_sigma {} < 0", self.blur_sigma)));
        }
        if self.morph_radius < 1 {
            return Err(LabelError::Params("morph_radius must be >= 1".into()));
        }
        if !(self.marker_offset > 0.0 && self.marker_offset < 1.0) {
            return Err(LabelError::Params(format!(
                "marker_offset {} outside (0, 1)",
                self.marker_offset
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("invalid pseudo-label parameters: {0}")]
    Params(String),
    #[error("image {0}x{1} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum")]
    TooSmall(usize, usize),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Intermediate images of one pipeline run, for inspection and figures.
#[derive(Clone, Debug)]
pub struct LabelStages {
    pub smoothed: GrayImage,
    pub background_below: GrayImage,
    pub background_above: GrayImage,
    pub residue: GrayImage,
    pub threshold: f64,
    pub mask: BinaryMask,
}

pub fn generate_label(img: &GrayImage, params: &PseudoLabelParams) -> Result<BinaryMask, LabelError> {
    Ok(generate_label_staged(img, params)?.mask)
}

pub fn generate_label_staged(img: &GrayImage, params: &PseudoLabelParams) -> Result<LabelStages, LabelError> {
    params.validate()?;
    let (w, h) = img.dims();
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(LabelError::TooSmall(w, h));
    }

    let mut f = normalize(img);
    if params.invert {
        f = f.map(|v| 1.0 - v);
    }
    let f = filters::gaussian_blur(&f, params.blur_sigma)?;

    let (lo, hi) = f.min_max();
    let r = params.border_radius;
    let below = filters::reconstruct(&border_marker(&f, lo, r, [f64::min, f64::max]), &f, ReconstructMode::ByDilation)?;
    let above = filters::reconstruct(&border_marker(&f, hi, r, [f64::max, f64::min]), &f, ReconstructMode::ByErosion)?;

    let mut residue = GrayImage::from_fn(w, h, |x, y| {
        let v = f.get(x, y);
        (v - below.get(x, y)) - (above.get(x, y) - v)
    });
    if params.use_sobel {
        let edges = normalize(&filters::sobel_magnitude(&f)?);
        residue = residue.zip_map(&edges, |r, e| r * e).map_err(FilterError::from)?;
    }

    let threshold = filters::otsu_threshold(&residue, 256)?.max(params.marker_offset);
    let binary = residue.map(|v| if v > threshold { 1.0 } else { 0.0 });
    let opened = filters::morph(&binary, MorphOp::Open, params.morph_radius)?;
    let mask = BinaryMask::from_fn(w, h, |x, y| opened.get(x, y) > 0.5);
    let mask = particles::remove_small(&mask, params.min_area, Connectivity::Eight);

    Ok(LabelStages {
        smoothed: f,
        background_below: below,
        background_above: above,
        residue,
        threshold,
        mask,
    })
}

/// `fill` inside the frame; on the frame, `f` opened (`[min, max]`) or
/// closed (`[max, min]`) along the cyclic perimeter, which keeps the marker
/// on the correct side of `f` for reconstruction.
fn border_marker(f: &GrayImage, fill: f64, radius: usize, [first, second]: [fn(f64, f64) -> f64; 2]) -> GrayImage {
    let (w, h) = f.dims();
    let mut marker = GrayImage::filled(w, h, fill);
    let ring = perimeter(w, h);
    let values: Vec<f64> = ring.iter().map(|&(x, y)| f.get(x, y)).collect();
    let smoothed = cyclic_filter(&cyclic_filter(&values, radius, first), radius, second);
    for (&(x, y), v) in ring.iter().zip(smoothed) {
        marker.set(x, y, v);
    }
    marker
}

/// Frame pixels in clockwise order, each once.
fn perimeter(w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut ring: Vec<(usize, usize)> = (0..w).map(|x| (x, 0)).collect();
    ring.extend((1..h).map(|y| (w - 1, y)));
    ring.extend((0..w - 1).rev().map(|x| (x, h - 1)));
    ring.extend((1..h - 1).rev().map(|y| (0, y)));
    ring
}

/// Running `op` over a cyclic window of `2 * radius + 1` samples.
fn cyclic_filter(values: &[f64], radius: usize, op: fn(f64, f64) -> f64) -> Vec<f64> {
    let n = values.len();
    if radius == 0 || n == 0 {
        return values.to_vec();
    }
    let reach = radius.min(n / 2);
    (0..n)
        .map(|i| (0..=2 * reach).map(|d| values[(i + n + d - reach) % n]).fold(values[i], op))
        .collect()
}

/// Brightens masked pixels by [`OVERLAY_OFFSET`] for visual QA.
pub fn overlay(img: &GrayImage, mask: &BinaryMask) -> Result<GrayImage, LabelError> {
    ensure_same_dims(img.dims(), mask.dims()).map_err(FilterError::from)?;
    let (w, h) = img.dims();
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let v = img.get(x, y);
        if mask.get(x, y) {
            (v + OVERLAY_OFFSET).min(1.0)
        } else {
            v
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disks(w: usize, h: usize, centers: &[(f64, f64, f64)]) -> (GrayImage, BinaryMask) {
        let inside = |x: usize, y: usize| {
            centers
                .iter()
                .any(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
        };
        let img = GrayImage::from_fn(w, h, |x, y| if inside(x, y) { 0.4 } else { 0.75 });
        (img, BinaryMask::from_fn(w, h, inside))
    }

    #[test]
    fn recovers_clean_disks() {
        let (img, truth) = disks(96, 96, &[(24.0, 24.0, 9.0), (70.0, 30.0, 12.0), (40.0, 70.0, 10.0)]);
        let mask = generate_label(&img, &PseudoLabelParams::default()).unwrap();
        assert!(mask.iou(&truth).unwrap() > 0.9);
    }

    #[test]
    fn particle_cut_by_the_frame_keeps_its_neighbours() {
        // The left disk is cut by the frame; the right one touches it through a
        // narrow gap, so a raw border seed would flood both.
        let (img, truth) = disks(96, 96, &[(3.0, 48.0, 12.0), (30.0, 48.0, 12.0), (70.0, 70.0, 9.0)]);
        let mask = generate_label(&img, &PseudoLabelParams::default()).unwrap();
        assert!(mask.iou(&truth).unwrap() > 0.9);
        let raw = PseudoLabelParams { border_radius: 0, ..Default::default() };
        assert!(generate_label(&img, &raw).unwrap().iou(&truth).unwrap() < mask.iou(&truth).unwrap());
    }

    #[test]
    fn perimeter_visits_each_frame_pixel_once() {
        let ring = perimeter(5, 4);
        assert_eq!(ring.len(), 2 * 5 + 2 * 4 - 4);
        let unique: std::collections::BTreeSet<_> = ring.iter().collect();
        assert_eq!(unique.len(), ring.len());
        assert_eq!(cyclic_filter(&[0.0, 5.0, 0.0, 0.0], 1, f64::min), vec![0.0; 4]);
        assert_eq!(cyclic_filter(&[1.0, 5.0], 0, f64::min), vec![1.0, 5.0]);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = GrayImage::filled(40, 40, 0.5);
        assert!(matches!(
            generate_label(&img, &PseudoLabelParams::default()),
            Err(LabelError::Filter(FilterError::Degenerate(_)))
        ));
    }

    #[test]
    fn single_speckle_is_rejected() {
        let mut img = GrayImage::new(40, 40);
        img.set(20, 20, 1.0);
        let params = PseudoLabelParams {
            invert: false,
            min_area: 5,
            ..Default::default()
        };
        assert_eq!(generate_label(&img, &params).unwrap().count(), 0);
    }

    #[test]
    fn rejects_small_images_and_bad_params() {
        let img = GrayImage::filled(16, 40, 0.5);
        assert!(matches!(
            generate_label(&img, &PseudoLabelParams::default()),
            Err(LabelError::TooSmall(16, 40))
        ));
        let bad = PseudoLabelParams {
            marker_offset: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn min_area_is_monotone() {
        let (img, _) = disks(64, 64, &[(15.0, 15.0, 2.5), (40.0, 40.0, 8.0), (50.0, 12.0, 4.0)]);
        let mut prev: Option<BinaryMask> = None;
        for min_area in [0, 10, 30, 60, 300] {
            let params = PseudoLabelParams {
                min_area,
                ..Default::default()
            };
            let m = generate_label(&img, &params).unwrap();
            if let Some(p) = &prev {
                for (a, b) in m.data().iter().zip(p.data()) {
                    assert!(!a || *b, "raising min_area added a pixel");
                }
            }
            prev = Some(m);
        }
    }

    #[test]
    fn sobel_variant_runs() {
        let (img, truth) = disks(64, 64, &[(30.0, 30.0, 10.0)]);
        // the edge-weighted residue is ring shaped, so open gently
        let params = PseudoLabelParams {
            use_sobel: true,
            morph_radius: 1,
            ..Default::default()
        };
        let m = generate_label(&img, &params).unwrap();
        assert!(m.count() > 0);
        assert!(!m.get(30, 30), "flat particle interior has no edge response");
        assert_eq!(m.dims(), truth.dims());
    }

    #[test]
    fn overlay_examples() {
        let img = GrayImage::from_rows(&[&[0.2, 0.9]]).unwrap();
        assert_eq!(overlay(&img, &BinaryMask::new(2, 1)).unwrap(), img);
        let zeros = GrayImage::new(2, 2);
        let full = overlay(&zeros, &BinaryMask::filled(2, 2, true)).unwrap();
        assert!(full.data().iter().all(|&v| v == OVERLAY_OFFSET));
        let one = BinaryMask::from_vec(2, 1, vec![false, true]).unwrap();
        assert_eq!(overlay(&img, &one).unwrap().data(), &[0.2, 1.0]);
        assert!(overlay(&img, &BinaryMask::new(1, 1)).is_err());
    }
}
