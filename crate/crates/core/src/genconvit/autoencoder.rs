//! Network A's convolutional autoencoder and Network B's variational autoencoder.

use rand_chacha::ChaCha8Rng;

use super::config::{AeConfig, VaeConfig};
use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Mode, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn check_image(shape: &[usize], channels: usize, size: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != channels || shape[2] != size || shape[3] != size {
        return Err(Error::shape(format!(
            "expected [batch, {channels}, {size}, {size}], got {shape:?}"
        )));
    }
    Ok(())
}

/// Kernel-3 padding-1 convolution geometry with the given stride.
fn down(stride: usize) -> ConvGeom {
    ConvGeom::new(3, stride, 1)
}

/// Transposed geometry that undoes [`down`]: 2×2 stride-2 upsampling or a
/// size-preserving 3×3.
fn up(stride: usize) -> ConvGeom {
    if stride == 2 {
        ConvGeom::new(2, 2, 0)
    } else {
        ConvGeom::new(3, 1, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    cfg: AeConfig,
    latent: [usize; 3],
    encoder: Vec<Conv2d>,
    decoder: Vec<ConvTranspose2d>,
}

impl Autoencoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &AeConfig) -> Result<Self> {
        let latent = cfg.latent_shape()?;
        let mut encoder = Vec::new();
        let mut c_in = cfg.input_channels;
        for (i, (&c, &s)) in cfg.encoder_channels.iter().zip(&cfg.encoder_strides).enumerate() {
            encoder.push(Conv2d::new(store, rng, &format!("{prefix}.enc{i}"), c_in, c, down(s), 1, true)?);
            c_in = c;
        }
        let mut decoder = Vec::new();
        let n = cfg.encoder_channels.len();
        for i in 0..n {
            let stage = n - 1 - i;
            let c_out = if stage == 0 {
                cfg.input_channels
            } else {
                cfg.encoder_channels[stage - 1]
            };
            let geom = up(cfg.encoder_strides[stage]);
            decoder.push(ConvTranspose2d::new(store, rng, &format!("{prefix}.dec{i}"), c_in, c_out, geom)?);
            c_in = c_out;
        }
        Ok(Autoencoder {
            cfg: cfg.clone(),
            latent,
            encoder,
            decoder,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.latent
    }

    /// `[B, C, S, S]` image batch to `[B, C', H', W']` latents, ReLU after every stage.
    pub fn encode(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_image(&g.shape(x), self.cfg.input_channels, self.cfg.input_size)?;
        let mut h = x;
        for conv in &self.encoder {
            h = g.relu(conv.forward(g, store, h)?);
        }
        Ok(h)
    }

    /// Latents back to images in `[0, 1]` (terminal sigmoid).
    pub fn decode(&self, g: &Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 4 || s[1..] != self.latent {
            return Err(Error::shape(format!(
                "latent {s:?} does not match {:?}",
                self.latent
            )));
        }
        let mut h = z;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            h = if i == last { g.sigmoid(h) } else { g.relu(h) };
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct VariationalAutoencoder {
    cfg: VaeConfig,
    encoder: Vec<(Conv2d, BatchNorm2d)>,
    mu_head: Conv2d,
    logvar_head: Conv2d,
    decoder: Vec<ConvTranspose2d>,
}

/// Posterior parameters and the decoded sample, all graph values.
#[derive(Clone, Copy, Debug)]
pub struct VaePass {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub reconstruction: Var,
}

impl VariationalAutoencoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &VaeConfig) -> Result<Self> {
        let enc_shape = cfg.encoder_shape()?;
        let mut encoder = Vec::new();
        let mut c_in = cfg.input_channels;
        for (i, (&c, &s)) in cfg.encoder_channels.iter().zip(&cfg.encoder_strides).enumerate() {
            let conv = Conv2d::new(store, rng, &format!("{prefix}.enc{i}"), c_in, c, down(s), 1, false)?;
            let bn = BatchNorm2d::new(store, &format!("{prefix}.enc{i}.bn"), c)?;
            encoder.push((conv, bn));
            c_in = c;
        }
        let point = ConvGeom::new(1, 1, 0);
        let mu_head = Conv2d::new(store, rng, &format!("{prefix}.mu"), enc_shape[0], enc_shape[0], point, 1, true)?;
        let logvar_head =
            Conv2d::new(store, rng, &format!("{prefix}.logvar"), enc_shape[0], enc_shape[0], point, 1, true)?;
        let mut decoder = Vec::new();
        let mut c_in = cfg.decoder_input[0];
        for (i, (&c, &s)) in cfg.decoder_channels.iter().zip(&cfg.decoder_strides).enumerate() {
            decoder.push(ConvTranspose2d::new(store, rng, &format!("{prefix}.dec{i}"), c_in, c, up(s))?);
            c_in = c;
        }
        Ok(VariationalAutoencoder {
            cfg: cfg.clone(),
            encoder,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    /// Image batch to `(mu, logvar)`, each `[B, latent_dim]`.
    pub fn encode(&self, g: &Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<(Var, Var)> {
        check_image(&g.shape(x), self.cfg.input_channels, self.cfg.input_size)?;
        let batch = g.shape(x)[0];
        let mut h = x;
        for (conv, bn) in &self.encoder {
            h = conv.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.leaky_relu(h, self.cfg.leaky_slope);
        }
        let mu = self.mu_head.forward(g, store, h)?;
        let logvar = self.logvar_head.forward(g, store, h)?;
        let flat = [batch, self.cfg.latent_dim];
        Ok((g.reshape(mu, &flat)?, g.reshape(logvar, &flat)?))
    }

    /// `[B, latent_dim]` latent to the mean image `[B, C, R, R]` in `[0, 1]`.
    pub fn decode(&self, g: &Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "latent {s:?} does not have length {}",
                self.cfg.latent_dim
            )));
        }
        let [c, h, w] = self.cfg.decoder_input;
        let mut x = g.reshape(z, &[s[0], c, h, w])?;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            x = if i == last { g.sigmoid(x) } else { g.relu(x) };
        }
        Ok(x)
    }

    /// Encode, sample with `noise` (zero noise decodes the posterior mean), decode.
    pub fn pass(&self, g: &Graph, store: &ParamStore, x: Var, mode: Mode, noise: Tensor) -> Result<VaePass> {
        let (mu, logvar) = self.encode(g, store, x, mode)?;
        let z = reparameterize_on_graph(g, mu, logvar, noise)?;
        let reconstruction = self.decode(g, store, z)?;
        Ok(VaePass {
            mu,
            logvar,
            z,
            reconstruction,
        })
    }
}

/// `z = mu + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, noise: &Tensor) -> Result<Tensor> {
    mu.check_same_shape(logvar)?;
    mu.check_same_shape(noise)?;
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(noise.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

pub fn reparameterize_on_graph(g: &Graph, mu: Var, logvar: Var, noise: Tensor) -> Result<Var> {
    if noise.shape() != g.shape(mu).as_slice() {
        return Err(Error::shape("noise must match the latent shape"));
    }
    let std = g.exp(g.scale(logvar, 0.5));
    let eps = g.constant(noise);
    g.add(mu, g.mul(std, eps)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn graph_image(g: &Graph, b: usize, size: usize) -> Var {
        g.constant(Tensor::from_fn(vec![b, 3, size, size], |i| ((i * 37) % 101) as f64 / 100.0))
    }

    #[test]
    fn desk_autoencoder_round_trips_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = Autoencoder::new(&mut store, &mut rng, "ae", &AeConfig::desk()).unwrap();
        let g = Graph::new();
        let x = graph_image(&g, 2, 56);
        let z = ae.encode(&g, &store, x).unwrap();
        assert_eq!(g.shape(z), vec![2, 32, 7, 7]);
        let y = ae.decode(&g, &store, z).unwrap();
        assert_eq!(g.shape(y), vec![2, 3, 56, 56]);
        assert!(g.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
        let wrong = graph_image(&g, 1, 64);
        assert!(ae.encode(&g, &store, wrong).is_err());
    }

    #[test]
    fn desk_vae_shapes_and_eval_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = VaeConfig::desk();
        let vae = VariationalAutoencoder::new(&mut store, &mut rng, "vae", &cfg).unwrap();
        let run = || {
            let g = Graph::new();
            let x = graph_image(&g, 2, 56);
            let p = vae.pass(&g, &store, x, Mode::Eval, Tensor::zeros(vec![2, cfg.latent_dim])).unwrap();
            assert_eq!(g.shape(p.mu), vec![2, 1568]);
            assert_eq!(g.shape(p.reconstruction), vec![2, 3, 28, 28]);
            assert_eq!(*g.value(p.z), *g.value(p.mu));
            (g.value(p.mu).as_ref().clone(), g.value(p.reconstruction).as_ref().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reparameterize_examples() {
        let mu = Tensor::from_vec(vec![0.5, -1.0]);
        let zero = Tensor::zeros(vec![2]);
        assert_eq!(reparameterize(&mu, &zero, &zero).unwrap(), mu);
        let z = reparameterize(&mu, &zero, &Tensor::ones(vec![2])).unwrap();
        assert_eq!(z.data(), &[1.5, 0.0]);
        assert!(reparameterize(&mu, &zero, &Tensor::zeros(vec![3])).is_err());
    }
}
