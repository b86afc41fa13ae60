//! Central finite differences for verifying analytic backward passes.

/// Step used by the double-precision checks.
pub const FD_STEP: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i` in `coords`.
pub fn numeric_gradient(x: &mut [f64], coords: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest absolute discrepancy still read as finite-difference rounding
/// noise: around a structurally zero gradient (a bias feeding batch norm, for
/// instance) or a vanishingly small one, relative error is meaningless.
pub const NOISE_FLOOR: f64 = 1e-8;

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Analytic and numeric gradients agree within `rtol`, or their difference
/// is below [`NOISE_FLOOR`] in every coordinate.
pub fn gradients_agree(analytic: &[f64], numeric: &[f64], rtol: f64) -> bool {
    let noise = analytic.iter().zip(numeric).all(|(a, n)| (a - n).abs() <= NOISE_FLOOR);
    noise || relative_error(analytic, numeric) <= rtol
}
