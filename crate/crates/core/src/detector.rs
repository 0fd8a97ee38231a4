//! The contract every benchmarked detector implements.
//!
//! Class index 0 is real and 1 is fake; fake is the positive class throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Mode, ParamStore};
use crate::nn::LossValue;
use crate::tensor::Tensor;

pub const REAL: usize = 0;
pub const FAKE: usize = 1;

/// Graph values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    /// `[B, 2]` class logits.
    pub logits: Var,
    pub reconstruction: Option<Var>,
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    /// Per-network outputs of an ensemble.
    pub branches: Vec<DetectorOutput>,
}

impl DetectorOutput {
    pub fn logits_only(logits: Var) -> Self {
        DetectorOutput {
            logits,
            reconstruction: None,
            mu: None,
            logvar: None,
            branches: Vec::new(),
        }
    }
}

/// A differentiable scalar loss and its named parts.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub components: Vec<(String, Var)>,
}

impl LossTerms {
    pub fn value(&self, g: &Graph) -> LossValue {
        LossValue {
            value: g.value(self.total).item(),
            components: self
                .components
                .iter()
                .map(|(k, v)| (k.clone(), g.value(*v).item()))
                .collect(),
        }
    }
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// Side of the square input images.
    fn input_size(&self) -> usize;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Architecture settings, stored in checkpoints.
    fn config_echo(&self) -> serde_json::Value;

    /// `x` is a `[B, 3, S, S]` batch in `[0, 1]`. Training mode may draw noise from `rng`.
    fn forward(&self, g: &Graph, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<DetectorOutput>;

    fn loss(&self, g: &Graph, out: &DetectorOutput, x: Var, labels: &[usize]) -> Result<LossTerms>;

    /// Eval-mode fake probabilities for a `[B, 3, S, S]` batch.
    fn fake_probabilities(&self, images: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let x = g.constant(images.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&g, x, Mode::Eval, &mut rng)?;
        fake_probabilities_from_logits(&g.value(out.logits))
    }
}

/// Softmax fake-class probability of a logit pair.
pub fn fake_probability(logits: &[f64]) -> f64 {
    // softmax over two classes is the sigmoid of the logit difference
    crate::nn::activations::sigmoid_scalar(logits[FAKE] - logits[REAL])
}

pub fn fake_probabilities_from_logits(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.rank() != 2 || logits.shape()[1] != 2 {
        return Err(Error::shape(format!("expected [B, 2] logits, got {:?}", logits.shape())));
    }
    Ok(logits.data().chunks(2).map(fake_probability).collect())
}

/// Mean cross entropy of `labels` under `logits`, weighted.
pub fn classification_loss(g: &Graph, logits: Var, labels: &[usize], weight: f64) -> Result<Var> {
    let ce = g.cross_entropy_logits(logits, labels)?;
    Ok(if weight == 1.0 { ce } else { g.scale(ce, weight) })
}

/// Replaces a detector's weights with a checkpoint's, which must match exactly.
pub fn load_weights(detector: &mut dyn Detector, params: &ParamStore) -> Result<()> {
    detector.params().check_compatible(params)?;
    *detector.params_mut() = params.clone();
    Ok(())
}
