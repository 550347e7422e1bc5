//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares `analytic` against central differences of `f` around `point`.
///
/// Returns the worst coordinate of
/// `|analytic_i - (f(x + h e_i) - f(x - h e_i)) / 2h| / max(1, |analytic_i|)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    point: &Tensor,
    analytic: &Tensor,
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "step size must be positive");
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    let mut x = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let above = f(&x)?;
        x.data_mut()[i] = orig - h;
        let below = f(&x)?;
        x.data_mut()[i] = orig;
        if !above.is_finite() || !below.is_finite() {
            return Err(Error::NonFinite(format!("f near coordinate {i} of the check point")));
        }
        let numeric = (above - below) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
