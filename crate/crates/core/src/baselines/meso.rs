//! Meso4-style detector: four small conv blocks with pooling and a two-layer head.
//!
//! Block widths 8/8/16/16, kernels 3/5/5/5, pools 2/2/2/4, a 16-unit hidden
//! layer with LeakyReLU(0.1). With the phase channel enabled the same network
//! runs over RGB plus the phase map.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spsl::spsl_phase_features_batch;
use crate::autodiff::{ConvGeom, Graph, Var};
use crate::detector::{classification_loss, Detector, DetectorOutput, LossTerms};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Linear, Mode, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MesoConfig {
    pub input_size: usize,
    pub widths: [usize; 4],
    pub kernels: [usize; 4],
    pub pools: [usize; 4],
    pub hidden: usize,
    pub leaky_slope: f64,
    /// Append the phase-spectrum channel to the RGB input.
    pub phase_channel: bool,
}

impl MesoConfig {
    pub fn new(input_size: usize, phase_channel: bool) -> Self {
        MesoConfig {
            input_size,
            widths: [8, 8, 16, 16],
            kernels: [3, 5, 5, 5],
            pools: [2, 2, 2, 4],
            hidden: 16,
            leaky_slope: 0.1,
            phase_channel,
        }
    }

    fn feature_side(&self) -> Result<usize> {
        let total: usize = self.pools.iter().product();
        if self.input_size == 0 || !self.input_size.is_multiple_of(total) {
            return Err(Error::invalid(format!(
                "input size {} must be a positive multiple of {total}",
                self.input_size
            )));
        }
        Ok(self.input_size / total)
    }
}

#[derive(Clone, Debug)]
pub struct Meso4 {
    name: String,
    cfg: MesoConfig,
    store: ParamStore,
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    fc1: Linear,
    fc2: Linear,
}

impl Meso4 {
    pub fn new(name: &str, cfg: &MesoConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let side = cfg.feature_side()?;
        if !(cfg.leaky_slope > 0.0 && cfg.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky slope must lie in (0, 1)"));
        }
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let mut c_in = if cfg.phase_channel { 4 } else { 3 };
        for i in 0..4 {
            let k = cfg.kernels[i];
            let geom = ConvGeom::new(k, 1, k / 2);
            let conv = Conv2d::new(&mut store, rng, &format!("conv{i}"), c_in, cfg.widths[i], geom, 1, true)?;
            let bn = BatchNorm2d::new(&mut store, &format!("bn{i}"), cfg.widths[i])?;
            blocks.push((conv, bn));
            c_in = cfg.widths[i];
        }
        let flat = c_in * side * side;
        let fc1 = Linear::new(&mut store, rng, "fc1", flat, cfg.hidden)?;
        let fc2 = Linear::new(&mut store, rng, "fc2", cfg.hidden, 2)?;
        Ok(Meso4 {
            name: name.into(),
            cfg: cfg.clone(),
            store,
            blocks,
            fc1,
            fc2,
        })
    }
}

impl Detector for Meso4 {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_size(&self) -> usize {
        self.cfg.input_size
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.name, "architecture": self.cfg })
    }

    fn forward(&self, g: &Graph, x: Var, mode: Mode, _rng: &mut ChaCha8Rng) -> Result<DetectorOutput> {
        crate::genconvit::check_image(&g.shape(x), 3, self.cfg.input_size)?;
        let mut h = if self.cfg.phase_channel {
            g.constant(spsl_phase_features_batch(&g.value(x))?)
        } else {
            x
        };
        for ((conv, bn), &pool) in self.blocks.iter().zip(&self.cfg.pools) {
            h = conv.forward(g, &self.store, h)?;
            h = g.relu(bn.forward(g, &self.store, h, mode)?);
            h = g.max_pool2d(h, pool, pool)?;
        }
        let s = g.shape(h);
        let h = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        let h = g.leaky_relu(self.fc1.forward(g, &self.store, h)?, self.cfg.leaky_slope);
        Ok(DetectorOutput::logits_only(self.fc2.forward(g, &self.store, h)?))
    }

    fn loss(&self, g: &Graph, out: &DetectorOutput, _x: Var, labels: &[usize]) -> Result<LossTerms> {
        let ce = classification_loss(g, out.logits, labels, 1.0)?;
        Ok(LossTerms {
            total: ce,
            components: vec![("ce".into(), ce)],
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn paper_resolution_model_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Meso4::new("meso4", &MesoConfig::new(256, false), &mut rng).unwrap();
        let n = m.params().num_trainable();
        assert!(n < 100_000, "{n} parameters");
        // conv 224 + 1608 + 3216 + 6416, bn 4·(16 + 16 + 32 + 32)/2, fc 16400 + 34
        assert_eq!(n, 224 + 1608 + 3216 + 6416 + 96 + 16400 + 34);
    }

    #[test]
    fn forward_gives_finite_logits_with_and_without_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(vec![2, 3, 64, 64], |_| rng.gen_range(0.0..1.0));
        for phase in [false, true] {
            let m = Meso4::new("m", &MesoConfig::new(64, phase), &mut rng).unwrap();
            let p = m.fake_probabilities(&x).unwrap();
            assert_eq!(p.len(), 2);
            assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            assert_eq!(p, m.fake_probabilities(&x).unwrap());
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(Meso4::new("m", &MesoConfig::new(100, false), &mut rng).is_err());
        let m = Meso4::new("m", &MesoConfig::new(64, false), &mut rng).unwrap();
        assert!(m.fake_probabilities(&Tensor::zeros(vec![1, 3, 128, 128])).is_err());
    }
}
