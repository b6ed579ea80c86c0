//! Finite-difference helpers for checking hand-written adjoints.
//!
//! These live in the library (rather than behind `cfg(test)`) so integration
//! tests and downstream crates can reuse the same tolerance definition.

use rand::Rng;

use crate::series::ChannelSeries;

/// Denominator floor for [`rel_err`], so that gradients that are zero up to
/// rounding do not produce spurious huge relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central difference `(f(h) − f(−h)) / 2h` of a scalar function of a perturbation.
pub fn central_diff(step: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(step) - f(-step)) / (2.0 * step)
}

/// Five-point stencil; exact (up to rounding) for polynomials of degree ≤ 4.
pub fn five_point_diff(step: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(-2.0 * step) - 8.0 * f(-step) + 8.0 * f(step) - f(2.0 * step)) / (12.0 * step)
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Uniform entries in `[-1, 1)`.
pub fn random_series(rng: &mut impl Rng, channels: usize, len: usize) -> ChannelSeries {
    let data = ndarray::Array2::from_shape_fn((channels, len), |_| rng.random_range(-1.0..1.0));
    ChannelSeries::from_array_unchecked(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencils_on_polynomials() {
        let quartic = |x: f64| 3.0 * x.powi(4) - x.powi(3) + 2.0 * x - 1.0;
        // Derivative at 0 is 2; the five-point stencil cancels every higher term.
        assert!((five_point_diff(0.5, quartic) - 2.0).abs() < 1e-13);
        assert!((central_diff(0.5, |x| 4.0 * x * x + 3.0 * x) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
