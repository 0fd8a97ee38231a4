//! Comparison detectors and the model registry.
//!
//! Meso4 is a compact mesoscopic-feature CNN; the phase variant feeds it an
//! extra channel rebuilt from the Fourier phase spectrum.

mod meso;
mod registry;
mod spsl;

pub use meso::{Meso4, MesoConfig};
pub use registry::{meso_input_size, BuildOptions, Constructor, Registry, RESERVED_MODELS};
pub use spsl::{phase_map, spsl_phase_features, spsl_phase_features_batch};
