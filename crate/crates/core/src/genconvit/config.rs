//! Architecture configuration and the two scale presets.
//!
//! `paper_tiny` keeps the published interface shapes (224 input, 256×7×7 AE
//! latent, 12544-wide VAE latent, 112 reconstruction, 768-wide tokens) with
//! shallow stages. `desk` shrinks everything so training runs on a CPU in
//! seconds; every shape is re-derived from the config.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    PaperTiny,
    Desk,
}

impl std::str::FromStr for ScalePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_tiny" => Ok(ScalePreset::PaperTiny),
            "desk" => Ok(ScalePreset::Desk),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected paper_tiny or desk)"
            ))),
        }
    }
}

/// Spatial side after a chain of stride-`s`, kernel-3, padding-1 convolutions,
/// requiring each stride-2 stage to halve an even side exactly.
fn downsampled_side(input: usize, strides: &[usize], what: &str) -> Result<usize> {
    let mut side = input;
    for (i, &s) in strides.iter().enumerate() {
        match s {
            1 => {}
            2 if side.is_multiple_of(2) && side > 0 => side /= 2,
            2 => {
                return Err(Error::shape(format!(
                    "{what}: stage {i} cannot halve side {side} (input {input})"
                )))
            }
            _ => return Err(Error::invalid(format!("{what}: stride {s} not in {{1, 2}}"))),
        }
    }
    Ok(side)
}

/// Network A's convolutional autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
}

impl AeConfig {
    pub const STAGES: usize = 5;

    pub fn paper() -> Self {
        AeConfig {
            input_size: 224,
            input_channels: 3,
            encoder_channels: vec![16, 32, 64, 128, 256],
            encoder_strides: vec![2; 5],
        }
    }

    pub fn desk() -> Self {
        AeConfig {
            input_size: 56,
            input_channels: 3,
            encoder_channels: vec![8, 16, 32, 32, 32],
            encoder_strides: vec![2, 2, 2, 1, 1],
        }
    }

    /// `(C, H, W)` of the encoder output.
    pub fn latent_shape(&self) -> Result<[usize; 3]> {
        if self.encoder_channels.len() != Self::STAGES || self.encoder_strides.len() != Self::STAGES
        {
            return Err(Error::invalid(format!(
                "autoencoder needs exactly {} encoder stages",
                Self::STAGES
            )));
        }
        if self.input_channels == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let side = downsampled_side(self.input_size, &self.encoder_strides, "autoencoder")?;
        Ok([self.encoder_channels[Self::STAGES - 1], side, side])
    }
}

/// Network B's variational autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub latent_dim: usize,
    /// The latent vector is unflattened to this `(C, H, W)` before decoding.
    pub decoder_input: [usize; 3],
    pub decoder_channels: Vec<usize>,
    pub decoder_strides: Vec<usize>,
    pub recon_size: usize,
    pub leaky_slope: f64,
}

impl VaeConfig {
    pub const STAGES: usize = 4;

    pub fn paper() -> Self {
        VaeConfig {
            input_size: 224,
            input_channels: 3,
            encoder_channels: vec![16, 32, 64, 64],
            encoder_strides: vec![2; 4],
            latent_dim: 12544,
            decoder_input: [256, 7, 7],
            decoder_channels: vec![128, 64, 32, 3],
            decoder_strides: vec![2; 4],
            recon_size: 112,
            leaky_slope: 0.1,
        }
    }

    pub fn desk() -> Self {
        VaeConfig {
            input_size: 56,
            input_channels: 3,
            encoder_channels: vec![8, 16, 32, 32],
            encoder_strides: vec![2, 2, 2, 1],
            latent_dim: 1568,
            decoder_input: [32, 7, 7],
            decoder_channels: vec![16, 8, 8, 3],
            decoder_strides: vec![2, 2, 1, 1],
            recon_size: 28,
            leaky_slope: 0.1,
        }
    }

    /// `(C, H, W)` of the encoder output; its product must equal `latent_dim`.
    pub fn encoder_shape(&self) -> Result<[usize; 3]> {
        if self.encoder_channels.len() != Self::STAGES
            || self.encoder_strides.len() != Self::STAGES
            || self.decoder_channels.len() != Self::STAGES
            || self.decoder_strides.len() != Self::STAGES
        {
            return Err(Error::invalid(format!(
                "variational autoencoder needs exactly {} encoder and decoder stages",
                Self::STAGES
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky slope must lie in (0, 1)"));
        }
        let side = downsampled_side(self.input_size, &self.encoder_strides, "vae encoder")?;
        let shape = [self.encoder_channels[Self::STAGES - 1], side, side];
        if shape.iter().product::<usize>() != self.latent_dim {
            return Err(Error::shape(format!(
                "encoder output {shape:?} flattens to {} but latent_dim is {}",
                shape.iter().product::<usize>(),
                self.latent_dim
            )));
        }
        if self.decoder_input.iter().product::<usize>() != self.latent_dim {
            return Err(Error::shape(format!(
                "decoder input {:?} does not hold {} values",
                self.decoder_input, self.latent_dim
            )));
        }
        let mut side = self.decoder_input[1];
        for &s in &self.decoder_strides {
            match s {
                1 => {}
                2 => side *= 2,
                _ => return Err(Error::invalid(format!("decoder stride {s} not in {{1, 2}}"))),
            }
        }
        if self.decoder_input[1] != self.decoder_input[2] || side != self.recon_size {
            return Err(Error::shape(format!(
                "decoder produces {side} pixels, recon_size is {}",
                self.recon_size
            )));
        }
        if self.decoder_channels[Self::STAGES - 1] != self.input_channels {
            return Err(Error::shape("decoder must end with the image channel count"));
        }
        Ok(shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ConvnextLike,
    SwinLike,
}

/// One backbone of the hybrid head.
///
/// For `convnext_like`, `widths[i]`/`depths[i]` describe stage `i` after a
/// `patch`-strided stem; each later stage halves the resolution. For
/// `swin_like`, `widths[0]` is the token width, later stages merge 2×2
/// patches, and `heads[i]` attention heads run over `window × window` tiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub patch: usize,
    pub window: usize,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    pub fn convnext(widths: Vec<usize>, depths: Vec<usize>, patch: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::ConvnextLike,
            depths,
            widths,
            patch,
            window: 0,
            heads: vec![],
            mlp_ratio: 4,
        }
    }

    pub fn swin(widths: Vec<usize>, depths: Vec<usize>, heads: Vec<usize>, window: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::SwinLike,
            depths,
            widths,
            patch: 1,
            window,
            heads,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.widths.len();
        if stages == 0 || self.depths.len() != stages || self.widths.contains(&0) {
            return Err(Error::invalid("backbone needs matching non-empty widths and depths"));
        }
        match self.kind {
            BackboneKind::ConvnextLike => {
                if self.patch == 0 {
                    return Err(Error::invalid("stem patch must be positive"));
                }
            }
            BackboneKind::SwinLike => {
                if self.window == 0 || self.heads.len() != stages {
                    return Err(Error::invalid("swin needs a window and heads per stage"));
                }
                for (w, h) in self.widths.iter().zip(&self.heads) {
                    if *h == 0 || w % h != 0 {
                        return Err(Error::invalid(format!("width {w} not divisible by {h} heads")));
                    }
                }
                for pair in self.widths.windows(2) {
                    if pair[1] != 2 * pair[0] {
                        return Err(Error::invalid("swin stage widths must double"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Feature-map side after the convnext stages for an input of `side` pixels.
    pub fn convnext_output_side(&self, side: usize) -> Result<usize> {
        if !side.is_multiple_of(self.patch) {
            return Err(Error::shape(format!("input {side} not divisible by patch {}", self.patch)));
        }
        downsampled_side(side / self.patch, &vec![2; self.widths.len() - 1], "convnext")
    }

    /// Checks that every swin stage tiles its grid with whole windows.
    pub fn check_swin_grid(&self, side: usize) -> Result<()> {
        let mut side = side;
        for stage in 0..self.widths.len() {
            if stage > 0 {
                if !side.is_multiple_of(2) {
                    return Err(Error::shape(format!("cannot merge patches on a {side}-grid")));
                }
                side /= 2;
            }
            if !side.is_multiple_of(self.window) {
                return Err(Error::shape(format!(
                    "window {} does not divide feature-map side {side}",
                    self.window
                )));
            }
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Loss weights of the detectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub mse: f64,
    /// KL regulariser on Network B's latent; 0 disables it.
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            mse: 1.0,
            kl: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConViTConfig {
    pub preset: ScalePreset,
    pub ae: AeConfig,
    pub vae: VaeConfig,
    pub convnext: BackboneConfig,
    pub swin: BackboneConfig,
    pub loss: LossWeights,
}

impl GenConViTConfig {
    pub fn preset(preset: ScalePreset) -> Self {
        match preset {
            ScalePreset::PaperTiny => GenConViTConfig {
                preset,
                ae: AeConfig::paper(),
                vae: VaeConfig::paper(),
                convnext: BackboneConfig::convnext(vec![96, 192, 384, 768], vec![1, 1, 1, 1], 4),
                swin: BackboneConfig::swin(vec![768], vec![2], vec![12], 7),
                loss: LossWeights::default(),
            },
            ScalePreset::Desk => GenConViTConfig {
                preset,
                ae: AeConfig::desk(),
                vae: VaeConfig::desk(),
                convnext: BackboneConfig::convnext(vec![32, 64], vec![1, 1], 4),
                swin: BackboneConfig::swin(vec![64], vec![1], vec![2], 7),
                loss: LossWeights::default(),
            },
        }
    }

    pub fn input_size(&self) -> usize {
        self.ae.input_size
    }

    pub fn validate(&self) -> Result<()> {
        self.ae.latent_shape()?;
        self.vae.encoder_shape()?;
        if self.ae.input_size != self.vae.input_size {
            return Err(Error::invalid("both networks must take the same input size"));
        }
        if self.convnext.kind != BackboneKind::ConvnextLike || self.swin.kind != BackboneKind::SwinLike
        {
            return Err(Error::invalid("hybrid head needs a convnext_like and a swin_like backbone"));
        }
        self.convnext.validate()?;
        self.swin.validate()?;
        let grid = self.convnext.convnext_output_side(self.input_size())?;
        self.swin.check_swin_grid(grid)?;
        let w = &self.loss;
        if !(w.ce >= 0.0 && w.mse >= 0.0 && w.kl >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_shapes_follow_from_the_stage_plans() {
        let cfg = GenConViTConfig::preset(ScalePreset::PaperTiny);
        cfg.validate().unwrap();
        assert_eq!(cfg.ae.latent_shape().unwrap(), [256, 7, 7]);
        assert_eq!(cfg.vae.encoder_shape().unwrap(), [64, 14, 14]);
        assert_eq!(64 * 14 * 14, 12544);
        assert_eq!(cfg.convnext.convnext_output_side(224).unwrap(), 7);
    }

    #[test]
    fn desk_preset_is_consistent() {
        let cfg = GenConViTConfig::preset(ScalePreset::Desk);
        cfg.validate().unwrap();
        assert_eq!(cfg.ae.latent_shape().unwrap(), [32, 7, 7]);
        assert_eq!(cfg.vae.encoder_shape().unwrap(), [32, 7, 7]);
    }

    #[test]
    fn five_halvings_of_56_are_rejected() {
        let mut ae = AeConfig::desk();
        ae.encoder_strides = vec![2; 5];
        assert!(matches!(ae.latent_shape(), Err(Error::Shape(_))));
        ae.encoder_strides = vec![2; 4];
        assert!(ae.latent_shape().is_err());
    }

    #[test]
    fn mismatched_latent_dim_is_rejected() {
        let mut vae = VaeConfig::paper();
        vae.latent_dim = 256 * 7 * 7 + 1;
        assert!(vae.encoder_shape().is_err());
    }

    #[test]
    fn window_must_divide_the_grid() {
        let swin = BackboneConfig::swin(vec![64], vec![1], vec![2], 5);
        assert!(swin.check_swin_grid(7).is_err());
        assert!(swin.check_swin_grid(10).is_ok());
    }

    #[test]
    fn presets_parse() {
        assert_eq!("desk".parse::<ScalePreset>().unwrap(), ScalePreset::Desk);
        assert!("huge".parse::<ScalePreset>().is_err());
    }
}
