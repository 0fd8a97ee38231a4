//! Named parameter storage and the standard layers built on the autodiff graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    /// Buffers (running statistics) are stored alongside weights but never optimised.
    pub trainable: bool,
}

/// Weights and buffers of a model, keyed by layer-qualified name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` defined twice")));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        entry.value.check_same_shape(&value)?;
        entry.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, value) in updates {
            self.set(&name, value)?;
        }
        Ok(())
    }

    /// Copies every entry of `other` whose name and shape match; returns how many were copied.
    ///
    /// This is the hook for starting from externally trained weights.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, entry) in &mut self.entries {
            if let Some(src) = other.entries.get(name) {
                if src.value.shape() == entry.value.shape() {
                    entry.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape(format!(
                "{} parameters vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (name, entry) in &self.entries {
            let theirs = other
                .entries
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))?;
            if theirs.value.shape() != entry.value.shape() || theirs.trainable != entry.trainable {
                return Err(Error::shape(format!("parameter `{name}` differs")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Square-kernel 2-D convolution; weight `[C_out, C_in / groups, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    geom: ConvGeom,
    groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "{name}: {in_channels}->{out_channels} channels not divisible into {groups} groups"
            )));
        }
        let fan_in = in_channels / groups * geom.kernel * geom.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = format!("{name}.weight");
        store.insert(
            &weight,
            uniform(
                rng,
                vec![out_channels, in_channels / groups, geom.kernel, geom.kernel],
                bound,
            ),
            true,
        )?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, uniform(rng, vec![out_channels], bound), true)?;
            Some(b)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            geom,
            groups,
            in_channels,
            out_channels,
        })
    }

    pub fn geom(&self) -> ConvGeom {
        self.geom
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(store, b)).transpose()?;
        g.conv2d(x, w, b, self.geom, self.groups)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }
}

/// Transposed convolution; weight `[C_in, C_out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: String,
    bias: Option<String>,
    geom: ConvGeom,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        let fan_in = out_channels * geom.kernel * geom.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(
            &weight,
            uniform(
                rng,
                vec![in_channels, out_channels, geom.kernel, geom.kernel],
                bound,
            ),
            true,
        )?;
        store.insert(&bias, uniform(rng, vec![out_channels], bound), true)?;
        Ok(ConvTranspose2d {
            weight,
            bias: Some(bias),
            geom,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(store, b)).transpose()?;
        g.conv_transpose2d(x, w, b, self.geom)
    }
}

/// Affine map over the last axis; weight `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, uniform(rng, vec![in_features, out_features], bound), true)?;
        store.insert(&bias, uniform(rng, vec![out_features], bound), true)?;
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        let gamma = format!("{name}.weight");
        let beta = format!("{name}.bias");
        store.insert(&gamma, Tensor::ones(vec![features]), true)?;
        store.insert(&beta, Tensor::zeros(vec![features]), true)?;
        Ok(LayerNorm {
            gamma,
            beta,
            eps: 1e-6,
        })
    }

    /// Normalises over `axis` (1 for NCHW feature maps, the last axis for tokens).
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var, axis: usize) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, axis, gamma, beta, self.eps)
    }
}

/// Batch normalisation over NCHW maps with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let bn = BatchNorm2d {
            gamma: format!("{name}.weight"),
            beta: format!("{name}.bias"),
            running_mean: format!("{name}.running_mean"),
            running_var: format!("{name}.running_var"),
            momentum: 0.1,
            eps: 1e-5,
        };
        store.insert(&bn.gamma, Tensor::ones(vec![channels]), true)?;
        store.insert(&bn.beta, Tensor::zeros(vec![channels]), true)?;
        store.insert(&bn.running_mean, Tensor::zeros(vec![channels]), false)?;
        store.insert(&bn.running_var, Tensor::ones(vec![channels]), false)?;
        Ok(bn)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        let running_mean = store.value(&self.running_mean)?;
        let running_var = store.value(&self.running_var)?;
        match mode {
            Mode::Eval => g.batch_norm_eval(x, gamma, beta, running_mean, running_var, self.eps),
            Mode::Train => {
                let shape = g.shape(x);
                let count = (shape[0] * shape[2] * shape[3]) as f64;
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let new_mean = Tensor::from_fn(vec![mean.len()], |c| {
                    (1.0 - m) * running_mean.data()[c] + m * mean[c]
                });
                let new_var = Tensor::from_fn(vec![var.len()], |c| {
                    (1.0 - m) * running_var.data()[c] + m * var[c] * unbias
                });
                g.record_buffer_update(&self.running_mean, new_mean);
                g.record_buffer_update(&self.running_var, new_var);
                Ok(y)
            }
        }
    }
}
