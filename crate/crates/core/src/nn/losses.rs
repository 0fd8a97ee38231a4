use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to every argument of a logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// A scalar loss together with its named parts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        LossValue {
            value,
            components: BTreeMap::from([(name.to_string(), value)]),
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

fn safe_ln(p: f64) -> f64 {
    p.max(PROB_EPS).ln()
}

pub fn mse_loss(x: &Tensor, x_hat: &Tensor) -> Result<LossValue> {
    x.check_same_shape(x_hat)?;
    if x.is_empty() {
        return Err(Error::Empty("mse of empty tensors".into()));
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(LossValue::single("mse", sum / x.len() as f64))
}

/// Gradient of [`mse_loss`] with respect to `x_hat`.
pub fn mse_grad(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let n = x.len() as f64;
    x_hat.zip_map(x, |p, t| 2.0 * (p - t) / n)
}

/// Reconstruction loss as a negative log-likelihood: each pixel of `x_hat`
/// is read as a Bernoulli mean and the target intensity `x` in `[0, 1]` as a
/// soft outcome. The alternative to [`mse_loss`]; its minimum is the target's
/// own entropy, not 0, unless `x` is binary.
pub fn recon_log_likelihood_loss(x: &Tensor, x_hat: &Tensor) -> Result<LossValue> {
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("log-likelihood targets must lie in [0, 1]"));
    }
    let ce = cross_entropy_loss(x, x_hat)?;
    Ok(LossValue::single("recon_nll", ce.value))
}

/// Gradient of [`recon_log_likelihood_loss`] with respect to `x_hat`.
pub fn recon_log_likelihood_grad(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    cross_entropy_grad(x, x_hat)
}

/// Binary cross entropy `−mean[y·ln p + (1 − y)·ln(1 − p)]`.
///
/// Terms with a zero weight are skipped (`0·ln 0 = 0`) and every logarithm
/// argument is clamped below at [`PROB_EPS`].
pub fn cross_entropy_loss(labels: &Tensor, probs: &Tensor) -> Result<LossValue> {
    labels.check_same_shape(probs)?;
    if labels.is_empty() {
        return Err(Error::Empty("cross entropy of empty tensors".into()));
    }
    let sum: f64 = labels
        .data()
        .iter()
        .zip(probs.data())
        .map(|(&y, &p)| {
            let mut term = 0.0;
            if y != 0.0 {
                term += y * safe_ln(p);
            }
            if y != 1.0 {
                term += (1.0 - y) * safe_ln(1.0 - p);
            }
            term
        })
        .sum();
    Ok(LossValue::single("ce", -sum / labels.len() as f64))
}

/// Gradient of [`cross_entropy_loss`] with respect to `probs`.
pub fn cross_entropy_grad(labels: &Tensor, probs: &Tensor) -> Result<Tensor> {
    let n = labels.len() as f64;
    probs.zip_map(labels, |p, y| {
        let mut d = 0.0;
        if y != 0.0 && p > PROB_EPS {
            d -= y / p;
        }
        if y != 1.0 && 1.0 - p > PROB_EPS {
            d += (1.0 - y) / (1.0 - p);
        }
        d / n
    })
}

fn batch_of(t: &Tensor) -> usize {
    if t.rank() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

/// KL divergence of `N(mu, diag(exp(logvar)))` from `N(0, I)`, summed over
/// latent dimensions and averaged over the leading batch axis (rank ≥ 2).
pub fn kl_diag_gaussian(mu: &Tensor, logvar: &Tensor) -> Result<LossValue> {
    mu.check_same_shape(logvar)?;
    if mu.is_empty() {
        return Err(Error::Empty("kl of empty tensors".into()));
    }
    // −½(1 + lv − μ² − e^lv) = ½(μ² + expm1(lv) − lv), which stays ≥ 0 in floating point.
    let sum: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp_m1() - lv))
        .sum();
    Ok(LossValue::single("kl", sum / batch_of(mu) as f64))
}

/// Gradients of [`kl_diag_gaussian`] with respect to `(mu, logvar)`.
pub fn kl_grad(mu: &Tensor, logvar: &Tensor) -> Result<(Tensor, Tensor)> {
    mu.check_same_shape(logvar)?;
    let b = batch_of(mu) as f64;
    Ok((mu.map(|m| m / b), logvar.map(|lv| 0.5 * lv.exp_m1() / b)))
}

/// `recon + beta · kl`; the components are stored weighted so they add up to the total.
pub fn vae_total_loss(recon: &LossValue, kl: &LossValue, beta: f64) -> LossValue {
    let weighted_kl = beta * kl.value;
    LossValue {
        value: recon.value + weighted_kl,
        components: BTreeMap::from([
            ("recon".to_string(), recon.value),
            ("kl".to_string(), weighted_kl),
        ]),
    }
}

/// Discriminator and generator objectives of a GAN, as batch means:
/// `ln D(x) + ln(1 − D(G(z)))` (maximised by D) and `ln(1 − D(G(z)))`
/// (minimised by G). Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]`.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(LossValue, LossValue)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Empty("adversarial losses need samples".into()));
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let real_term = d_real.data().iter().map(|&p| clamp(p).ln()).sum::<f64>() / d_real.len() as f64;
    let fake_term =
        d_fake.data().iter().map(|&p| (1.0 - clamp(p)).ln()).sum::<f64>() / d_fake.len() as f64;
    let d = LossValue {
        value: real_term + fake_term,
        components: BTreeMap::from([
            ("real".to_string(), real_term),
            ("fake".to_string(), fake_term),
        ]),
    };
    Ok((d, LossValue::single("fake", fake_term)))
}
