use super::kernel::gaussian_weights_1d;
use super::FilterError;
use crate::raster::GrayImage;

/// Gaussian smoothing with a kernel truncated at `ceil(3 sigma)`.
///
/// Borders replicate the edge pixel. The 2-D kernel is the outer product of
/// two normalized 1-D kernels, so the pass is done separably.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage, FilterError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(FilterError::Parameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let weights = gaussian_weights_1d(radius, sigma);
    let (w, h) = img.dims();
    let r = radius as isize;

    let mut tmp = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in weights.iter().enumerate() {
                acc += k * img.get_clamped(x as isize + i as isize - r, y as isize);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in weights.iter().enumerate() {
                acc += k * tmp.get_clamped(x as isize, y as isize + i as isize - r);
            }
            out.set(x, y, acc);
        }
    }
    Ok(out)
}

/// Gradient magnitude from the 3x3 Sobel pair, edge-replicated, unscaled.
pub fn sobel_magnitude(img: &GrayImage) -> Result<GrayImage, FilterError> {
    let (w, h) = img.dims();
    if w < 3 || h < 3 {
        return Err(FilterError::TooSmall(format!(
            "sobel needs at least 3x3, got {w}x{h}"
        )));
    }
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let p = |dx: isize, dy: isize| img.get_clamped(x as isize + dx, y as isize + dy);
        let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        (gx * gx + gy * gy).sqrt()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random())
    }

    #[test]
    fn blur_preserves_constants() {
        let img = GrayImage::filled(13, 9, 0.5);
        for sigma in [0.5, 1.0, 2.0, 3.3] {
            let out = gaussian_blur(&img, sigma).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-14));
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = random_image(7, 5, 1);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn impulse_center_matches_discrete_gaussian() {
        let mut img = GrayImage::new(9, 9);
        img.set(4, 4, 1.0);
        let out = gaussian_blur(&img, 1.0).unwrap();
        // independent 2-D summed-sample construction, radius ceil(3) = 3
        let mut total = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                total += (-((dx * dx + dy * dy) as f64) / 2.0).exp();
            }
        }
        assert!((out.get(4, 4) - 1.0 / total).abs() < 1e-15);
    }

    #[test]
    fn blur_preserves_interior_mean() {
        let img = random_image(64, 64, 7);
        for sigma in [1.0, 2.0] {
            let out = gaussian_blur(&img, sigma).unwrap();
            assert!((out.mean() - img.mean()).abs() < 2e-3);
            // away from borders every output is a convex combination, so the
            // interior means agree up to boundary exchange
            let inner = |im: &GrayImage| {
                let mut s = 0.0;
                for y in 10..54 {
                    for x in 10..54 {
                        s += im.get(x, y);
                    }
                }
                s / (44.0 * 44.0)
            };
            assert!((inner(&out) - inner(&img)).abs() < 5e-3);
        }
    }

    #[test]
    fn sobel_constant_is_zero_and_small_is_error() {
        let img = GrayImage::filled(4, 4, 0.3);
        assert!(sobel_magnitude(&img).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(sobel_magnitude(&GrayImage::new(2, 5)).is_err());
    }

    #[test]
    fn sobel_transpose_equivariance() {
        let img = random_image(6, 8, 3);
        let a = sobel_magnitude(&img.transpose()).unwrap();
        let b = sobel_magnitude(&img).unwrap().transpose();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn sobel_vertical_step_matches_brute_force() {
        let step = 1.0;
        let img = GrayImage::from_fn(5, 5, |x, _| if x >= 2 { step } else { 0.0 });
        let out = sobel_magnitude(&img).unwrap();
        // brute-force 3x3 correlation with explicit taps
        let gx_taps = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        for y in 1..4 {
            for x in 1..4 {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for j in 0..3 {
                    for i in 0..3 {
                        let v = img.get(x + i - 1, y + j - 1);
                        gx += gx_taps[j][i] * v;
                        gy += gx_taps[i][j] * v;
                    }
                }
                assert!((out.get(x, y) - (gx * gx + gy * gy).sqrt()).abs() < 1e-12);
            }
        }
        assert_eq!(out.get(1, 2), 4.0 * step);
        assert_eq!(out.get(2, 2), 4.0 * step);
        assert_eq!(out.get(3, 2), 0.0);
    }
}
