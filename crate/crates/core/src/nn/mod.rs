//! Reference implementations of the activation, loss and convolution formulas
//! the detectors are built from, plus a finite-difference gradient checker.
//!
//! Everything here works on plain [`Tensor`](crate::Tensor)s at `f64`; the
//! autodiff graph reuses the scalar kernels so both paths agree bit for bit.

pub mod activations;
pub mod conv;
pub mod gradcheck;
pub mod losses;

pub use activations::{gelu, leaky_relu, relu, sigmoid};
pub use conv::conv1d_reference;
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use losses::{
    adversarial_losses, cross_entropy_grad, cross_entropy_loss, kl_diag_gaussian, kl_grad,
    mse_grad, mse_loss, recon_log_likelihood_grad, recon_log_likelihood_loss, vae_total_loss, LossValue, PROB_EPS,
};
