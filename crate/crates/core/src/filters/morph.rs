use std::collections::VecDeque;

use super::FilterError;
use crate::raster::{ensure_same_dims, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
    /// Dilation of the erosion.
    Open,
    /// Erosion of the dilation.
    Close,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconstructMode {
    ByDilation,
    ByErosion,
}

/// Grayscale morphology with a `(2r+1)`-square structuring element.
pub fn morph(img: &GrayImage, op: MorphOp, radius: usize) -> Result<GrayImage, FilterError> {
    if radius < 1 {
        return Err(FilterError::Parameter("structuring element radius must be >= 1".into()));
    }
    Ok(match op {
        MorphOp::Erode => rank_filter(img, radius, f64::min),
        MorphOp::Dilate => rank_filter(img, radius, f64::max),
        MorphOp::Open => rank_filter(&rank_filter(img, radius, f64::min), radius, f64::max),
        MorphOp::Close => rank_filter(&rank_filter(img, radius, f64::max), radius, f64::min),
    })
}

// A square window min/max separates into a row pass and a column pass.
// Clamping the window to the image is the same as replicating the edge.
fn rank_filter(img: &GrayImage, radius: usize, pick: fn(f64, f64) -> f64) -> GrayImage {
    let (w, h) = img.dims();
    let mut rows = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            let mut acc = img.get(lo, y);
            for xx in lo + 1..=hi {
                acc = pick(acc, img.get(xx, y));
            }
            rows.set(x, y, acc);
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            let mut acc = rows.get(x, lo);
            for yy in lo + 1..=hi {
                acc = pick(acc, rows.get(x, yy));
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Morphological reconstruction of `marker` under (by dilation) or over
/// (by erosion) `mask`, with 4-connectivity, run to its fixed point.
pub fn reconstruct(
    marker: &GrayImage,
    mask: &GrayImage,
    mode: ReconstructMode,
) -> Result<GrayImage, FilterError> {
    ensure_same_dims(marker.dims(), mask.dims())?;
    let (w, _) = marker.dims();
    let bad = marker
        .data()
        .iter()
        .zip(mask.data())
        .position(|(&m, &k)| match mode {
            ReconstructMode::ByDilation => m > k,
            ReconstructMode::ByErosion => m < k,
        });
    if let Some(i) = bad {
        return Err(FilterError::Ordering {
            x: i % w,
            y: i / w,
            marker: marker.data()[i],
            mask: mask.data()[i],
        });
    }
    match mode {
        ReconstructMode::ByDilation => Ok(reconstruct_dilation(marker, mask)),
        ReconstructMode::ByErosion => {
            // negation is exact, so erosion is dilation of the negated pair
            let neg = |img: &GrayImage| img.map(|v| -v);
            Ok(neg(&reconstruct_dilation(&neg(marker), &neg(mask))))
        }
    }
}

// Hybrid raster / anti-raster / FIFO propagation.
fn reconstruct_dilation(marker: &GrayImage, mask: &GrayImage) -> GrayImage {
    let (w, h) = marker.dims();
    let m = mask.data();
    let mut j = marker.data().to_vec();

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut v = j[p];
            if y > 0 {
                v = v.max(j[p - w]);
            }
            if x > 0 {
                v = v.max(j[p - 1]);
            }
            j[p] = v.min(m[p]);
        }
    }

    let mut queue = VecDeque::new();
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let p = y * w + x;
            let mut v = j[p];
            if y + 1 < h {
                v = v.max(j[p + w]);
            }
            if x + 1 < w {
                v = v.max(j[p + 1]);
            }
            v = v.min(m[p]);
            j[p] = v;
            let below = y + 1 < h && j[p + w] < v && j[p + w] < m[p + w];
            let right = x + 1 < w && j[p + 1] < v && j[p + 1] < m[p + 1];
            if below || right {
                queue.push_back(p);
            }
        }
    }

    while let Some(p) = queue.pop_front() {
        let (x, y) = (p % w, p / w);
        let jp = j[p];
        let mut visit = |q: usize| {
            if j[q] < jp && j[q] != m[q] {
                j[q] = jp.min(m[q]);
                queue.push_back(q);
            }
        };
        if y > 0 {
            visit(p - w);
        }
        if y + 1 < h {
            visit(p + w);
        }
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < w {
            visit(p + 1);
        }
    }

    GrayImage::from_vec(w, h, j).expect("same dimensions")
}

/// One elementary geodesic dilation (erosion) step with 4-connectivity.
pub fn geodesic_step(
    current: &GrayImage,
    mask: &GrayImage,
    mode: ReconstructMode,
) -> Result<GrayImage, FilterError> {
    ensure_same_dims(current.dims(), mask.dims())?;
    let (w, h) = current.dims();
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let mut vals = vec![current.get(x, y)];
        if x > 0 {
            vals.push(current.get(x - 1, y));
        }
        if x + 1 < w {
            vals.push(current.get(x + 1, y));
        }
        if y > 0 {
            vals.push(current.get(x, y - 1));
        }
        if y + 1 < h {
            vals.push(current.get(x, y + 1));
        }
        match mode {
            ReconstructMode::ByDilation => {
                vals.into_iter().fold(f64::NEG_INFINITY, f64::max).min(mask.get(x, y))
            }
            ReconstructMode::ByErosion => {
                vals.into_iter().fold(f64::INFINITY, f64::min).max(mask.get(x, y))
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> GrayImage {
        GrayImage::from_fn(w, h, |_, _| rng.random())
    }

    fn iterate_to_fixed_point(marker: &GrayImage, mask: &GrayImage, mode: ReconstructMode) -> GrayImage {
        let mut cur = marker.clone();
        loop {
            let next = geodesic_step(&cur, mask, mode).unwrap();
            if next == cur {
                return cur;
            }
            cur = next;
        }
    }

    #[test]
    fn constant_image_unchanged_by_every_op() {
        let img = GrayImage::filled(6, 5, 0.4);
        for op in [MorphOp::Erode, MorphOp::Dilate, MorphOp::Open, MorphOp::Close] {
            assert_eq!(morph(&img, op, 2).unwrap(), img);
        }
        assert!(morph(&img, MorphOp::Erode, 0).is_err());
    }

    #[test]
    fn erosion_removes_single_bright_pixel() {
        let mut img = GrayImage::filled(5, 5, 0.1);
        img.set(2, 2, 0.9);
        let out = morph(&img, MorphOp::Erode, 1).unwrap();
        assert_eq!(out.get(2, 2), 0.1);
    }

    #[test]
    fn opening_is_idempotent_and_erode_dilate_bracket() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let img = random_image(8, 8, &mut rng);
            let once = morph(&img, MorphOp::Open, 1).unwrap();
            assert_eq!(morph(&once, MorphOp::Open, 1).unwrap(), once);
            let closed = morph(&img, MorphOp::Close, 1).unwrap();
            assert_eq!(morph(&closed, MorphOp::Close, 1).unwrap(), closed);
            let e = morph(&img, MorphOp::Erode, 1).unwrap();
            let d = morph(&img, MorphOp::Dilate, 1).unwrap();
            for i in 0..64 {
                assert!(e.data()[i] <= img.data()[i] && img.data()[i] <= d.data()[i]);
            }
        }
    }

    #[test]
    fn marker_equal_mask_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(7, 6, &mut rng);
        for mode in [ReconstructMode::ByDilation, ReconstructMode::ByErosion] {
            assert_eq!(reconstruct(&img, &img, mode).unwrap(), img);
        }
    }

    #[test]
    fn ordering_violation_names_first_pixel() {
        let mask = GrayImage::filled(3, 3, 0.5);
        let mut marker = GrayImage::filled(3, 3, 0.2);
        marker.set(1, 2, 0.7);
        marker.set(2, 2, 0.8);
        match reconstruct(&marker, &mask, ReconstructMode::ByDilation) {
            Err(FilterError::Ordering { x: 1, y: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(reconstruct(&mask, &marker, ReconstructMode::ByErosion).is_err());
    }

    #[test]
    fn two_plateaus_only_seeded_one_recovered() {
        // plateau A at columns 0..=1, plateau B at columns 3..=4, valley between
        let mask = GrayImage::from_fn(5, 5, |x, _| match x {
            0 | 1 => 0.8,
            2 => 0.1,
            _ => 0.6,
        });
        let mut marker = GrayImage::filled(5, 5, 0.0);
        marker.set(0, 2, 0.8);
        let got = reconstruct(&marker, &mask, ReconstructMode::ByDilation).unwrap();
        let oracle = iterate_to_fixed_point(&marker, &mask, ReconstructMode::ByDilation);
        assert_eq!(got, oracle);
        for y in 0..5 {
            assert_eq!(got.get(0, y), 0.8);
            assert_eq!(got.get(1, y), 0.8);
            assert_eq!(got.get(2, y), 0.1);
            assert_eq!(got.get(3, y), 0.1);
            assert_eq!(got.get(4, y), 0.1);
        }
    }

    #[test]
    fn matches_brute_force_iteration_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
            let mask = random_image(w, h, &mut rng);
            let lowered = mask.map(|v| v * 0.5);
            let raised = mask.map(|v| v + 0.3);
            // sparse markers exercise long propagation paths
            let sparse = GrayImage::from_fn(w, h, |x, y| {
                if (x * 7 + y * 3) % 11 == 0 {
                    mask.get(x, y)
                } else {
                    0.0
                }
            });
            for (marker, mode) in [
                (&lowered, ReconstructMode::ByDilation),
                (&sparse, ReconstructMode::ByDilation),
                (&raised, ReconstructMode::ByErosion),
            ] {
                let got = reconstruct(marker, &mask, mode).unwrap();
                assert_eq!(got, iterate_to_fixed_point(marker, &mask, mode));
                assert_eq!(geodesic_step(&got, &mask, mode).unwrap(), got);
                for i in 0..w * h {
                    let (m, r, k) = (marker.data()[i], got.data()[i], mask.data()[i]);
                    match mode {
                        ReconstructMode::ByDilation => assert!(m <= r && r <= k),
                        ReconstructMode::ByErosion => assert!(m >= r && r >= k),
                    }
                }
            }
        }
    }
}
