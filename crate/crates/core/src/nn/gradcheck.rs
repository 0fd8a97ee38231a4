//! Central finite-difference checks of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the gradient returned by `f` against central differences at `x`
/// and returns the largest componentwise relative error
/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
///
/// `f` maps a point to `(value, analytic gradient)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    grad_check_report(f, x, eps).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() || !analytic.all_finite() {
        return Err(Error::NonFinite("function or gradient at the base point".into()));
    }
    x.check_same_shape(&analytic)?;
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value near component {i}")));
        }
        numeric.push((plus - minus) / (2.0 * eps));
    }
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(RELATIVE_FLOOR);
        let err = (a - n).abs() / denom;
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        analytic: analytic.into_data(),
        numeric,
    })
}
