//! Finite-difference helpers for gradient audits.

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for a single coordinate.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Relative disagreement between an analytic and a numeric derivative.
///
/// Values whose magnitudes are both below `floor` are treated as agreeing
/// zeros (dead ReLUs give exact zeros analytically, tiny noise numerically).
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}
