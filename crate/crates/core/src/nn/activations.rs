use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian CDF. `½(1 + erf(x/√2))` written as `½ erfc(−x/√2)`, which avoids
/// cancellation in the left tail.
fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Exact GELU, `x · Φ(x)`.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let cdf = normal_cdf(x);
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// `x` for non-negative inputs, `slope · x` otherwise; `slope` must lie in (0, 1).
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::invalid(format!(
            "leaky_relu slope must be in (0, 1), got {slope}"
        )));
    }
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(&s(0.0)).item(), 0.5);
        let x = 2.0;
        assert!((sigmoid(&s(x)).item() - (1.0 - sigmoid(&s(-x)).item())).abs() < 1e-15);
        // 1 / (1 + e^-1)
        assert!((sigmoid(&s(1.0)).item() - 0.731_058_578_630_004_9).abs() < 1e-15);
        // no overflow in the tails
        assert_eq!(sigmoid(&s(-800.0)).item(), 0.0);
        assert_eq!(sigmoid(&s(800.0)).item(), 1.0);
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu(&s(-3.0)).item(), 0.0);
        assert_eq!(relu(&s(5.0)).item(), 5.0);
        let v = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(v.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(&s(0.0)).item(), 0.0);
        assert!((gelu(&s(10.0)).item() - 10.0).abs() < 1e-6);
        // 0.5 * (1 + erf(1/sqrt 2)), erf(0.7071067811865476) = 0.6826894921370859
        assert!((gelu(&s(1.0)).item() - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn leaky_relu_values_and_slope_validation() {
        assert!((leaky_relu(&s(-2.0), 0.1).unwrap().item() + 0.2).abs() < 1e-15);
        assert_eq!(leaky_relu(&s(3.0), 0.1).unwrap().item(), 3.0);
        assert_eq!(leaky_relu(&s(0.0), 0.5).unwrap().item(), 0.0);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(leaky_relu(&s(1.0), bad).is_err());
        }
    }
}
