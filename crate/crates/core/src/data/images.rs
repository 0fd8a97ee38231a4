//! Decoded frame sets and the synthetic blob corpus used for smoke runs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::frames::{resize_normalize, sample_frames, save_png, FaceCropper};
use super::manifest::{write_manifest, Label, Manifest, ManifestEntry, Split, ORIGINAL_METHOD};
use super::tree::scan_frame_tree;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames as `[3, S, S]` tensors with their labels and source samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageSet {
    pub images: Vec<Tensor>,
    /// Class indices: real 0, fake 1.
    pub labels: Vec<usize>,
    pub sample_ids: Vec<String>,
    pub methods: Vec<String>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the chosen items into a `[B, 3, S, S]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let items: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Ok((Tensor::stack(&items)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn push(&mut self, image: Tensor, label: Label, sample_id: &str, method: &str) {
        self.images.push(image);
        self.labels.push(label.index());
        self.sample_ids.push(sample_id.into());
        self.methods.push(method.into());
    }
}

/// Decodes up to `k` evenly spaced frames per entry of `split` (all entries
/// when `None`), resized to `size`. Entries load in parallel; order follows
/// the manifest.
pub fn load_image_set(
    manifest: &Manifest,
    split: Option<Split>,
    k: usize,
    size: usize,
    cropper: &dyn FaceCropper,
) -> Result<ImageSet> {
    let chosen: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    let decoded: Vec<Vec<Tensor>> = chosen
        .par_iter()
        .map(|e| {
            sample_frames(&e.frames, k)?
                .iter()
                .map(|f| resize_normalize(&cropper.crop(&manifest.resolve(f))?, size))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut set = ImageSet::default();
    for (e, frames) in chosen.iter().zip(decoded) {
        for img in frames {
            set.push(img, e.label, &e.sample_id, &e.method);
        }
    }
    Ok(set)
}

/// Manipulation tags cycled through by the synthetic corpus.
pub const SYNTHETIC_METHODS: [&str; 4] = ["facefusion", "facefusion_gan", "retalking", "wav2lip"];

/// Noisy mid-grey image with a soft disc: bright for fake, dark for real.
/// `(cy, cx)` is the disc centre as a fraction of the side.
pub fn blob_image(label: Label, size: usize, centre: (f64, f64), rng: &mut ChaCha8Rng) -> Tensor {
    let level = match label {
        Label::Fake => 0.9,
        Label::Real => 0.1,
    };
    let radius = size as f64 / 5.0;
    let (cy, cx) = (centre.0 * size as f64, centre.1 * size as f64);
    let mut t = Tensor::zeros(vec![3, size, size]);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            let inside = (1.0 - (d - radius).max(0.0) / 2.0).max(0.0);
            for c in 0..3 {
                let noise = rng.gen_range(-0.05..0.05);
                t.data_mut()[c * plane + y * size + x] = (0.5 + inside * (level - 0.5) + noise).clamp(0.0, 1.0);
            }
        }
    }
    t
}

fn random_centre(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7))
}

/// `n` blob images, alternating real and fake.
pub fn blob_set(n: usize, size: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ImageSet::default();
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
        let centre = random_centre(&mut rng);
        let img = blob_image(label, size, centre, &mut rng);
        let method = match label {
            Label::Real => ORIGINAL_METHOD,
            Label::Fake => SYNTHETIC_METHODS[(i / 2) % SYNTHETIC_METHODS.len()],
        };
        set.push(img, label, &format!("blob_{i:04}"), method);
    }
    set
}

/// Writes `clips` short blob clips of `frames` PNG frames each as a labelled
/// frame tree under `dir/frames` (see [`scan_frame_tree`]) plus an
/// unassigned manifest at `dir/manifest.jsonl`, and returns the manifest
/// path. Even-numbered clips are real.
pub fn write_synthetic_corpus(dir: &Path, clips: usize, frames: usize, size: usize, seed: u64) -> Result<PathBuf> {
    if clips == 0 || frames == 0 || size == 0 {
        return Err(Error::invalid("synthetic corpus needs at least one clip, frame and pixel"));
    }
    let root = dir.join("frames");
    (0..clips).into_par_iter().try_for_each(|i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (label, clip_dir) = if i % 2 == 0 {
            (Label::Real, root.join("real"))
        } else {
            let method = SYNTHETIC_METHODS[(i / 2) % SYNTHETIC_METHODS.len()];
            (Label::Fake, root.join("fake").join(method))
        };
        let clip_dir = clip_dir.join(format!("clip{i:03}"));
        let start = random_centre(&mut rng);
        for j in 0..frames {
            // the blob drifts slowly so consecutive frames differ
            let t = j as f64 / frames.max(2) as f64;
            let centre = (start.0 + 0.1 * t, start.1 - 0.1 * t);
            save_png(&blob_image(label, size, centre, &mut rng), &clip_dir.join(format!("{j:03}.png")))?;
        }
        Ok::<_, Error>(())
    })?;
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &scan_frame_tree(&root)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::frames::IdentityCropper;
    use crate::data::manifest::load_manifest;

    #[test]
    fn blobs_separate_by_brightness() {
        let set = blob_set(8, 16, 0);
        for (img, &l) in set.images.iter().zip(&set.labels) {
            assert!(img.min() >= 0.0 && img.max() <= 1.0);
            let m = img.mean();
            assert!(if l == 1 { m > 0.5 } else { m < 0.5 });
        }
        assert_eq!(set.labels, vec![0, 1, 0, 1, 0, 1, 0, 1]);
        let (b, labels) = set.batch(&[1, 2]).unwrap();
        assert_eq!(b.shape(), &[2, 3, 16, 16]);
        assert_eq!(labels, vec![1, 0]);
    }

    #[test]
    fn synthetic_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic_corpus(dir.path(), 4, 5, 16, 1).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert_eq!(m.entries[2].method, "facefusion");
        assert_eq!(m.entries[0].sample_id, "real_clip000");
        let set = load_image_set(&m, None, 3, 8, &IdentityCropper).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.images[0].shape(), &[3, 8, 8]);
        assert_eq!(set.sample_ids[3], m.entries[1].sample_id);
    }
}
