//! Dataset manifests, splits, frame sampling, decoding, anonymisation and augmentation.
//!
//! Manifests point at pre-extracted face frames; face detection itself is
//! delegated to a [`FaceCropper`] adapter. All randomness is seeded.

mod anonymize;
mod augment;
mod frames;
mod images;
mod manifest;
mod split;
mod stats;
mod tree;

pub use anonymize::{anonymize_names, AnonymizationMap};
pub use augment::{
    apply_transform, augment, augment_with_report, hsv_to_rgb, rgb_to_hsv, AugmentationConfig, Magnitudes, Transform,
};
pub use frames::{
    image_to_tensor, normalize_image, resize_normalize, sample_frames, sample_indices, save_png, tensor_to_image,
    FaceCropper, IdentityCropper,
};
pub use images::{blob_image, blob_set, load_image_set, write_synthetic_corpus, ImageSet, SYNTHETIC_METHODS};
pub(crate) use manifest::write_atomic;
pub use manifest::{load_manifest, write_manifest, Label, Manifest, ManifestEntry, Split, ORIGINAL_METHOD};
pub use split::{split_dataset, SplitSpec};
pub use stats::{compute_dataset_stats, DatasetStats};
pub use tree::{clip_id, scan_frame_tree, FRAME_EXTENSIONS};
