//! Name-to-constructor table for every detector the harness can build.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::meso::{Meso4, MesoConfig};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::genconvit::{CombineMode, GenConViT, GenConViTConfig, ScalePreset, Variant};

/// Detectors evaluated in published comparisons whose weights and code are
/// not shipped here; they can still be registered by a plug-in.
pub const RESERVED_MODELS: [&str; 3] = ["efficientnet_b4", "ucf", "xception"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub preset: ScalePreset,
    /// Seeds weight initialisation.
    pub seed: u64,
    pub combine: CombineMode,
}

impl BuildOptions {
    pub fn new(preset: ScalePreset, seed: u64) -> Self {
        BuildOptions {
            preset,
            seed,
            combine: CombineMode::default(),
        }
    }
}

pub type Constructor = Arc<dyn Fn(&BuildOptions) -> Result<Box<dyn Detector>> + Send + Sync>;

/// Input side of the mesoscopic baselines; a multiple of their total pooling factor 64.
pub fn meso_input_size(preset: ScalePreset) -> usize {
    match preset {
        ScalePreset::PaperTiny => 256,
        ScalePreset::Desk => 64,
    }
}

#[derive(Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, Constructor>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The bundled detectors: three GenConViT variants and two baselines.
    pub fn with_defaults() -> Self {
        let mut r = Registry::new();
        let genconvit = |variant: Variant| -> Constructor {
            Arc::new(move |o: &BuildOptions| {
                let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
                let cfg = GenConViTConfig::preset(o.preset);
                Ok(Box::new(GenConViT::new(variant, &cfg, o.combine, &mut rng)?) as Box<dyn Detector>)
            })
        };
        let meso = |name: &'static str, phase: bool| -> Constructor {
            Arc::new(move |o: &BuildOptions| {
                let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
                let cfg = MesoConfig::new(meso_input_size(o.preset), phase);
                Ok(Box::new(Meso4::new(name, &cfg, &mut rng)?) as Box<dyn Detector>)
            })
        };
        let defaults = [
            ("genconvit", genconvit(Variant::Combined)),
            ("genconvit_ae", genconvit(Variant::Ae)),
            ("genconvit_vae", genconvit(Variant::Vae)),
            ("meso4", meso("meso4", false)),
            ("spsl_meso", meso("spsl_meso", true)),
        ];
        for (name, ctor) in defaults {
            r.register(name, ctor).expect("bundled names are distinct");
        }
        r
    }

    pub fn register(&mut self, name: &str, ctor: Constructor) -> Result<()> {
        if name.is_empty() {
            return Err(Error::invalid("model name must not be empty"));
        }
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateModel(name.into()));
        }
        self.entries.insert(name.into(), ctor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Constructor> {
        if let Some(c) = self.entries.get(name) {
            return Ok(Arc::clone(c));
        }
        if RESERVED_MODELS.contains(&name) {
            Err(Error::NotBundled(name.into()))
        } else {
            Err(Error::UnknownModel(name.into()))
        }
    }

    pub fn build(&self, name: &str, options: &BuildOptions) -> Result<Box<dyn Detector>> {
        (self.get(name)?)(options)
    }

    /// Registered names in sorted order.
    pub fn list(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}
