//! Frame selection and image decoding into normalised tensors.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::resample::resize_bilinear;
use crate::tensor::Tensor;

/// Indices of up to `k` frames out of `n`, evenly spread and strictly
/// increasing: `round(j (n - 1) / (k - 1))`, or the middle frame when `k` is 1.
pub fn sample_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("frame count k must be at least 1"));
    }
    if n <= k {
        return Ok((0..n).collect());
    }
    if k == 1 {
        return Ok(vec![(n - 1) / 2]);
    }
    let span = (n - 1) as f64 / (k - 1) as f64;
    Ok((0..k).map(|j| (j as f64 * span).round() as usize).collect())
}

/// Selects up to `k` of `frames` with [`sample_indices`], preserving order.
pub fn sample_frames<T: Clone>(frames: &[T], k: usize) -> Result<Vec<T>> {
    Ok(sample_indices(frames.len(), k)?.into_iter().map(|i| frames[i].clone()).collect())
}

/// `[3, H, W]` tensor with values `pixel / 255`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("buffer matches shape")
}

/// Quantises a `[3, H, W]` tensor in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

/// Bilinear resize of a decoded RGB image to `target x target`, in `[0, 1]`.
pub fn normalize_image(img: &RgbImage, target: usize) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let t = image_to_tensor(img);
    if t.shape()[1] == target && t.shape()[2] == target {
        return Ok(t);
    }
    // interpolation is convex so the range is preserved; clamp guards rounding
    Ok(resize_bilinear(&t, target, target)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Decodes an image file and resizes it to `3 x target x target` in `[0, 1]`.
pub fn resize_normalize(path: &Path, target: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    normalize_image(&img.to_rgb8(), target)
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    tensor_to_image(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Maps a frame to an image of the face in it. Manifests normally list
/// pre-cropped faces; an external detector can be plugged in here.
pub trait FaceCropper: Send + Sync {
    fn crop(&self, frame: &Path) -> Result<PathBuf>;
}

/// Treats every frame as already cropped.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCropper;

impl FaceCropper for IdentityCropper {
    fn crop(&self, frame: &Path) -> Result<PathBuf> {
        Ok(frame.to_path_buf())
    }
}
