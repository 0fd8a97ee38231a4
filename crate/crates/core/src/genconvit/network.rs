//! Network A, Network B and their ensemble.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::autoencoder::{Autoencoder, VariationalAutoencoder};
use super::backbone::HybridBackbone;
use super::config::{GenConViTConfig, LossWeights};
use crate::autodiff::{Graph, Var};
use crate::detector::{classification_loss, fake_probability, Detector, DetectorOutput, LossTerms};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mode, ParamStore};
use crate::nn::{cross_entropy_loss, kl_diag_gaussian, mse_loss, LossValue};
use crate::resample::{resize_bilinear, resize_on_graph};
use crate::tensor::Tensor;

/// Classification head shared by both networks: one backbone applied to the
/// image and to its reconstruction, features concatenated, two FC layers.
#[derive(Clone, Debug)]
struct HybridHead {
    backbone: HybridBackbone,
    fc1: Linear,
    fc2: Linear,
    gelu: bool,
}

impl HybridHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &GenConViTConfig, gelu: bool) -> Result<Self> {
        let backbone = HybridBackbone::new(store, rng, &format!("{prefix}.backbone"), 3, &cfg.convnext, &cfg.swin)?;
        let d = 2 * backbone.output_width();
        let hidden = (d / 4).max(2);
        Ok(HybridHead {
            fc1: Linear::new(store, rng, &format!("{prefix}.fc1"), d, hidden)?,
            fc2: Linear::new(store, rng, &format!("{prefix}.fc2"), hidden, 2)?,
            backbone,
            gelu,
        })
    }

    fn forward(&self, g: &Graph, store: &ParamStore, image: Var, recon: Var) -> Result<Var> {
        let fa = self.backbone.forward(g, store, image, None)?;
        let fb = self.backbone.forward(g, store, recon, None)?;
        let h = self.fc1.forward(g, store, g.concat(&[fa, fb], 1)?)?;
        let h = if self.gelu { g.gelu(h) } else { g.relu(h) };
        self.fc2.forward(g, store, h)
    }
}

/// Autoencoder reconstruction plus GELU hybrid head.
#[derive(Clone, Debug)]
pub struct NetworkA {
    pub ae: Autoencoder,
    head: HybridHead,
}

impl NetworkA {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &GenConViTConfig) -> Result<Self> {
        Ok(NetworkA {
            ae: Autoencoder::new(store, rng, &format!("{prefix}.ae"), &cfg.ae)?,
            head: HybridHead::new(store, rng, prefix, cfg, true)?,
        })
    }

    /// Logits from an image and a reconstruction of the same size.
    pub fn classify(&self, g: &Graph, store: &ParamStore, image: Var, recon: Var) -> Result<Var> {
        self.head.forward(g, store, image, recon)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<DetectorOutput> {
        let latent = self.ae.encode(g, store, x)?;
        let recon = self.ae.decode(g, store, latent)?;
        let logits = self.classify(g, store, x, recon)?;
        Ok(DetectorOutput {
            reconstruction: Some(recon),
            ..DetectorOutput::logits_only(logits)
        })
    }

    pub fn loss(&self, g: &Graph, out: &DetectorOutput, labels: &[usize], w: &LossWeights) -> Result<LossTerms> {
        let ce = classification_loss(g, out.logits, labels, w.ce)?;
        Ok(LossTerms {
            total: ce,
            components: vec![("ce".into(), ce)],
        })
    }
}

/// Variational autoencoder reconstruction plus ReLU hybrid head.
#[derive(Clone, Debug)]
pub struct NetworkB {
    pub vae: VariationalAutoencoder,
    head: HybridHead,
    input_size: usize,
}

impl NetworkB {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &GenConViTConfig) -> Result<Self> {
        Ok(NetworkB {
            vae: VariationalAutoencoder::new(store, rng, &format!("{prefix}.vae"), &cfg.vae)?,
            head: HybridHead::new(store, rng, prefix, cfg, false)?,
            input_size: cfg.vae.input_size,
        })
    }

    pub fn classify(&self, g: &Graph, store: &ParamStore, image: Var, recon: Var) -> Result<Var> {
        // the reconstruction is smaller than the input; the head sees it upsampled
        let recon = resize_on_graph(g, recon, self.input_size, self.input_size)?;
        self.head.forward(g, store, image, recon)
    }

    /// `noise` of shape `[B, latent_dim]`; zero noise decodes the posterior mean.
    pub fn forward_with_noise(&self, g: &Graph, store: &ParamStore, x: Var, mode: Mode, noise: Tensor) -> Result<DetectorOutput> {
        let pass = self.vae.pass(g, store, x, mode, noise)?;
        let logits = self.classify(g, store, x, pass.reconstruction)?;
        Ok(DetectorOutput {
            logits,
            reconstruction: Some(pass.reconstruction),
            mu: Some(pass.mu),
            logvar: Some(pass.logvar),
            branches: Vec::new(),
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<DetectorOutput> {
        let shape = [g.shape(x)[0], self.vae.config().latent_dim];
        let noise = match mode {
            Mode::Train => Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng)),
            Mode::Eval => Tensor::zeros(shape.to_vec()),
        };
        self.forward_with_noise(g, store, x, mode, noise)
    }

    /// CE plus MSE against the input downsampled to the reconstruction size,
    /// plus an optional KL term.
    pub fn loss(&self, g: &Graph, out: &DetectorOutput, x: Var, labels: &[usize], w: &LossWeights) -> Result<LossTerms> {
        let recon = out
            .reconstruction
            .ok_or_else(|| Error::invalid("Network B loss needs a reconstruction"))?;
        let r = self.vae.config().recon_size;
        let target = g.constant(resize_bilinear(&g.value(x), r, r)?);
        let ce = classification_loss(g, out.logits, labels, w.ce)?;
        let mse = g.scale(g.mse(recon, target)?, w.mse);
        let mut total = g.add(ce, mse)?;
        let mut components = vec![("ce".to_string(), ce), ("mse".to_string(), mse)];
        if w.kl > 0.0 {
            let (mu, logvar) = out
                .mu
                .zip(out.logvar)
                .ok_or_else(|| Error::invalid("KL term needs latent statistics"))?;
            let batch = g.shape(mu)[0] as f64;
            // ½ Σ(μ² + e^lv − 1 − lv) per sample
            let inner = g.sub(g.add(g.square(mu), g.exp(logvar))?, logvar)?;
            let kl = g.scale(g.add_scalar(inner, -1.0), 0.5 * w.kl / batch);
            let kl = g.sum(kl);
            total = g.add(total, kl)?;
            components.push(("kl".into(), kl));
        }
        Ok(LossTerms { total, components })
    }
}

/// How the ensemble merges the two networks' fake probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Avg,
    Max,
    AOnly,
    BOnly,
}

impl CombineMode {
    pub fn combine(self, p_a: f64, p_b: f64) -> f64 {
        match self {
            CombineMode::Avg => 0.5 * (p_a + p_b),
            CombineMode::Max => p_a.max(p_b),
            CombineMode::AOnly => p_a,
            CombineMode::BOnly => p_b,
        }
    }
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(CombineMode::Avg),
            "max" => Ok(CombineMode::Max),
            "a_only" => Ok(CombineMode::AOnly),
            "b_only" => Ok(CombineMode::BOnly),
            other => Err(Error::invalid(format!(
                "unknown combine mode `{other}` (expected avg, max, a_only or b_only)"
            ))),
        }
    }
}

/// Plain-tensor view of one network's output.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConViTOutput {
    pub logits: Tensor,
    pub reconstruction: Option<Tensor>,
    pub latent_mu: Option<Tensor>,
    pub latent_logvar: Option<Tensor>,
}

impl GenConViTOutput {
    pub fn from_graph(g: &Graph, out: &DetectorOutput) -> Self {
        let take = |v: Option<Var>| v.map(|v| g.value(v).as_ref().clone());
        GenConViTOutput {
            logits: g.value(out.logits).as_ref().clone(),
            reconstruction: take(out.reconstruction),
            latent_mu: take(out.mu),
            latent_logvar: take(out.logvar),
        }
    }

    pub fn fake_probabilities(&self) -> Result<Vec<f64>> {
        crate::detector::fake_probabilities_from_logits(&self.logits)
    }
}

/// Per-sample ensemble scores from the two networks' outputs on the same batch.
pub fn combined_predict(a: &GenConViTOutput, b: &GenConViTOutput, mode: CombineMode) -> Result<Vec<f64>> {
    let (pa, pb) = (a.fake_probabilities()?, b.fake_probabilities()?);
    if pa.len() != pb.len() {
        return Err(Error::shape("outputs come from different batch sizes"));
    }
    Ok(pa.iter().zip(&pb).map(|(&x, &y)| mode.combine(x, y)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    A,
    B,
}

/// Loss of one network's output: CE for A; CE + MSE against `target`
/// downsampled to the reconstruction size for B.
pub fn network_losses(
    kind: NetworkKind,
    out: &GenConViTOutput,
    labels: &[usize],
    target: &Tensor,
    weights: &LossWeights,
) -> Result<LossValue> {
    let probs = Tensor::from_vec(out.fake_probabilities()?);
    let y = Tensor::from_vec(labels.iter().map(|&l| l as f64).collect());
    let ce = weights.ce * cross_entropy_loss(&y, &probs)?.value;
    let mut loss = LossValue::single("ce", ce);
    if kind == NetworkKind::B {
        let recon = out
            .reconstruction
            .as_ref()
            .ok_or_else(|| Error::invalid("Network B output has no reconstruction"))?;
        let r = recon.shape()[recon.rank() - 1];
        let mse = weights.mse * mse_loss(&resize_bilinear(target, r, r)?, recon)?.value;
        loss.components.insert("mse".into(), mse);
        loss.value += mse;
        if weights.kl > 0.0 {
            let (mu, lv) = out
                .latent_mu
                .as_ref()
                .zip(out.latent_logvar.as_ref())
                .ok_or_else(|| Error::invalid("KL term needs latent statistics"))?;
            let kl = weights.kl * kl_diag_gaussian(mu, lv)?.value;
            loss.components.insert("kl".into(), kl);
            loss.value += kl;
        }
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ae,
    Vae,
    Combined,
}

/// A GenConViT detector: Network A, Network B, or both as an ensemble.
#[derive(Clone, Debug)]
pub struct GenConViT {
    name: String,
    variant: Variant,
    cfg: GenConViTConfig,
    combine: CombineMode,
    store: ParamStore,
    a: Option<NetworkA>,
    b: Option<NetworkB>,
}

impl GenConViT {
    pub fn new(variant: Variant, cfg: &GenConViTConfig, combine: CombineMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (name, a, b) = match variant {
            Variant::Ae => ("genconvit_ae", Some(NetworkA::new(&mut store, rng, "a", cfg)?), None),
            Variant::Vae => ("genconvit_vae", None, Some(NetworkB::new(&mut store, rng, "b", cfg)?)),
            Variant::Combined => (
                "genconvit",
                Some(NetworkA::new(&mut store, rng, "a", cfg)?),
                Some(NetworkB::new(&mut store, rng, "b", cfg)?),
            ),
        };
        Ok(GenConViT {
            name: name.into(),
            variant,
            cfg: cfg.clone(),
            combine,
            store,
            a,
            b,
        })
    }

    pub fn config(&self) -> &GenConViTConfig {
        &self.cfg
    }

    pub fn network_a(&self) -> Option<&NetworkA> {
        self.a.as_ref()
    }

    pub fn network_b(&self) -> Option<&NetworkB> {
        self.b.as_ref()
    }

    fn need_a(&self) -> Result<&NetworkA> {
        self.a.as_ref().ok_or_else(|| Error::invalid(format!("{} has no Network A", self.name)))
    }

    fn need_b(&self) -> Result<&NetworkB> {
        self.b.as_ref().ok_or_else(|| Error::invalid(format!("{} has no Network B", self.name)))
    }

    /// `[B, 3, S, S]` images to Network A latents.
    pub fn ae_encode(&self, images: &Tensor) -> Result<Tensor> {
        let a = self.need_a()?;
        let g = Graph::new();
        let z = a.ae.encode(&g, &self.store, g.constant(images.clone()))?;
        Ok(g.value(z).as_ref().clone())
    }

    pub fn ae_decode(&self, latents: &Tensor) -> Result<Tensor> {
        let a = self.need_a()?;
        let g = Graph::new();
        let x = a.ae.decode(&g, &self.store, g.constant(latents.clone()))?;
        Ok(g.value(x).as_ref().clone())
    }

    /// Eval-mode posterior `(mu, logvar)`, each `[B, latent_dim]`.
    pub fn vae_encode(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = self.need_b()?;
        let g = Graph::new();
        let (mu, lv) = b.vae.encode(&g, &self.store, g.constant(images.clone()), Mode::Eval)?;
        Ok((g.value(mu).as_ref().clone(), g.value(lv).as_ref().clone()))
    }

    pub fn vae_decode(&self, z: &Tensor) -> Result<Tensor> {
        let b = self.need_b()?;
        let g = Graph::new();
        let x = b.vae.decode(&g, &self.store, g.constant(z.clone()))?;
        Ok(g.value(x).as_ref().clone())
    }

    /// Tensor outputs of each network present, A first.
    pub fn network_outputs(&self, images: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<GenConViTOutput>> {
        let g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&g, x, mode, rng)?;
        let parts = if out.branches.is_empty() {
            vec![out]
        } else {
            out.branches
        };
        Ok(parts.iter().map(|o| GenConViTOutput::from_graph(&g, o)).collect())
    }
}

impl Detector for GenConViT {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_size(&self) -> usize {
        self.cfg.input_size()
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.name,
            "variant": self.variant,
            "combine": self.combine,
            "architecture": self.cfg,
        })
    }

    fn forward(&self, g: &Graph, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<DetectorOutput> {
        match (&self.a, &self.b) {
            (Some(a), None) => a.forward(g, &self.store, x),
            (None, Some(b)) => b.forward(g, &self.store, x, mode, rng),
            (Some(a), Some(b)) => {
                let out_a = a.forward(g, &self.store, x)?;
                let out_b = b.forward(g, &self.store, x, mode, rng)?;
                let (la, lb) = (g.value(out_a.logits), g.value(out_b.logits));
                // ensemble score as a logit pair whose softmax returns it
                let mut pair = Vec::with_capacity(la.len());
                for (ra, rb) in la.data().chunks(2).zip(lb.data().chunks(2)) {
                    let p = self.combine.combine(fake_probability(ra), fake_probability(rb));
                    pair.push((1.0 - p).ln());
                    pair.push(p.ln());
                }
                let logits = g.constant(Tensor::new(la.shape().to_vec(), pair)?);
                Ok(DetectorOutput {
                    branches: vec![out_a, out_b],
                    ..DetectorOutput::logits_only(logits)
                })
            }
            (None, None) => unreachable!("constructed with at least one network"),
        }
    }

    fn loss(&self, g: &Graph, out: &DetectorOutput, x: Var, labels: &[usize]) -> Result<LossTerms> {
        let w = &self.cfg.loss;
        match (&self.a, &self.b) {
            (Some(a), None) => a.loss(g, out, labels, w),
            (None, Some(b)) => b.loss(g, out, x, labels, w),
            (Some(a), Some(b)) => {
                let [out_a, out_b] = out.branches.as_slice() else {
                    return Err(Error::invalid("ensemble output needs both branches"));
                };
                let la = a.loss(g, out_a, labels, w)?;
                let lb = b.loss(g, out_b, x, labels, w)?;
                let total = g.add(la.total, lb.total)?;
                let components = la
                    .components
                    .into_iter()
                    .map(|(k, v)| (format!("a.{k}"), v))
                    .chain(lb.components.into_iter().map(|(k, v)| (format!("b.{k}"), v)))
                    .collect();
                Ok(LossTerms { total, components })
            }
            (None, None) => unreachable!("constructed with at least one network"),
        }
    }
}
