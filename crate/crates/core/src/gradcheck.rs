//! Central finite-difference oracle for checking recorded gradients.

use crate::error::Result;

/// Step used by all gradient checks in this crate.
pub const FD_STEP: f64 = 1e-6;

/// Entries smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// Central differences of `f` around `x`.
pub fn finite_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, REL_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let g = finite_difference(|x| Ok(x[0] * x[0] + 3.0 * x[1]), &[2.0, -1.0], FD_STEP).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[1e-9], &[0.0]), 1e-9 / REL_FLOOR);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }
}
