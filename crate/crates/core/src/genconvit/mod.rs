//! GenConViT: two detectors that classify an image together with a
//! generative reconstruction of it.
//!
//! Network A reconstructs with a convolutional autoencoder and classifies
//! with a GELU head; Network B reconstructs with a variational autoencoder
//! and classifies with a ReLU head. Both heads run one ConvNeXt-like +
//! Swin-like hybrid backbone over the image and over its reconstruction and
//! concatenate the two feature vectors. The ensemble merges the networks'
//! fake probabilities at inference.

mod autoencoder;
mod backbone;
mod config;
mod network;

pub(crate) use autoencoder::check_image;
pub use autoencoder::{reparameterize, reparameterize_on_graph, Autoencoder, VaePass, VariationalAutoencoder};
pub use backbone::{ConvNextLike, HybridBackbone, HybridEmbed, SwinLike};
pub use config::{AeConfig, BackboneConfig, BackboneKind, GenConViTConfig, LossWeights, ScalePreset, VaeConfig};
pub use network::{
    combined_predict, network_losses, CombineMode, GenConViT, GenConViTOutput, NetworkA, NetworkB, NetworkKind,
    Variant,
};
