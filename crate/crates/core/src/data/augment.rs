//! Photometric and geometric augmentation of `[3, H, W]` images in `[0, 1]`.
//!
//! With probability `rate` a call applies a chain of one to `max_chain`
//! distinct enabled transforms in random order; otherwise the image is
//! returned untouched. Everything is driven by the per-call seed.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Rotate,
    Transpose,
    Hflip,
    Vflip,
    GaussNoise,
    ShiftScaleRotate,
    Clahe,
    Sharpen,
    Emboss,
    BrightnessContrast,
    HueSaturation,
}

impl Transform {
    pub const ALL: [Transform; 11] = [
        Transform::Rotate,
        Transform::Transpose,
        Transform::Hflip,
        Transform::Vflip,
        Transform::GaussNoise,
        Transform::ShiftScaleRotate,
        Transform::Clahe,
        Transform::Sharpen,
        Transform::Emboss,
        Transform::BrightnessContrast,
        Transform::HueSaturation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Transform::Rotate => "rotate",
            Transform::Transpose => "transpose",
            Transform::Hflip => "hflip",
            Transform::Vflip => "vflip",
            Transform::GaussNoise => "gauss_noise",
            Transform::ShiftScaleRotate => "shift_scale_rotate",
            Transform::Clahe => "clahe",
            Transform::Sharpen => "sharpen",
            Transform::Emboss => "emboss",
            Transform::BrightnessContrast => "brightness_contrast",
            Transform::HueSaturation => "hue_saturation",
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Transform::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown transform `{s}`")))
    }
}

/// Bounds each transform draws its strength from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Magnitudes {
    pub max_rotate_deg: f64,
    /// Fraction of the side.
    pub max_shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_noise_sigma: f64,
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    /// Additive brightness and multiplicative contrast offsets, both `±`.
    pub brightness: f64,
    pub contrast: f64,
    pub max_hue_deg: f64,
    /// Multiplicative saturation and value offsets, `±`.
    pub saturation: f64,
    pub value: f64,
    /// Blend weight range for the sharpen and emboss kernels.
    pub kernel_alpha_min: f64,
    pub kernel_alpha_max: f64,
}

impl Default for Magnitudes {
    fn default() -> Self {
        Magnitudes {
            max_rotate_deg: 30.0,
            max_shift: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
            max_noise_sigma: 0.05,
            clahe_clip: 2.0,
            clahe_tiles: 8,
            brightness: 0.2,
            contrast: 0.2,
            max_hue_deg: 10.0,
            saturation: 0.2,
            value: 0.2,
            kernel_alpha_min: 0.2,
            kernel_alpha_max: 0.5,
        }
    }
}

impl Magnitudes {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("max_rotate_deg", self.max_rotate_deg),
            ("max_shift", self.max_shift),
            ("max_noise_sigma", self.max_noise_sigma),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("max_hue_deg", self.max_hue_deg),
            ("saturation", self.saturation),
            ("value", self.value),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("magnitude {name} must be finite and non-negative")));
            }
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::invalid("scale range must satisfy 0 < min <= max"));
        }
        if !(self.clahe_clip >= 1.0 && self.clahe_clip.is_finite()) || self.clahe_tiles == 0 {
            return Err(Error::invalid("CLAHE needs clip >= 1 and at least one tile"));
        }
        if !(0.0 <= self.kernel_alpha_min && self.kernel_alpha_min <= self.kernel_alpha_max && self.kernel_alpha_max <= 1.0)
        {
            return Err(Error::invalid("kernel blend range must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Probability a call alters the image.
    pub rate: f64,
    pub transforms: Vec<Transform>,
    pub magnitudes: Magnitudes,
    /// Longest transform chain per call.
    pub max_chain: usize,
    /// Base seed; training derives per-call seeds from it.
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rate: 0.9,
            transforms: Transform::ALL.to_vec(),
            magnitudes: Magnitudes::default(),
            max_chain: 3,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(format!("augmentation rate {} is outside [0, 1]", self.rate)));
        }
        if self.max_chain == 0 {
            return Err(Error::invalid("max_chain must be at least 1"));
        }
        let mut seen = self.transforms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.transforms.len() {
            return Err(Error::invalid("transforms are listed more than once"));
        }
        self.magnitudes.validate()
    }
}

fn check_rgb(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::shape(format!("expected a non-empty [3, H, W] image, got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Applies one transform with strength drawn from `rng`; the result is clipped to `[0, 1]`.
/// Transpose leaves non-square images unchanged so the shape is kept.
pub fn apply_transform(image: &Tensor, t: Transform, m: &Magnitudes, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = check_rgb(image)?;
    let out = match t {
        Transform::Hflip => remap(image, |y, x| (y, w - 1 - x)),
        Transform::Vflip => remap(image, |y, x| (h - 1 - y, x)),
        Transform::Transpose if h == w => remap(image, |y, x| (x, y)),
        Transform::Transpose => image.clone(),
        Transform::Rotate => {
            let angle = symmetric(rng, m.max_rotate_deg).to_radians();
            warp_affine(image, angle, 1.0, 0.0, 0.0)
        }
        Transform::ShiftScaleRotate => {
            let angle = symmetric(rng, m.max_rotate_deg).to_radians();
            let scale = if m.scale_max > m.scale_min {
                rng.gen_range(m.scale_min..=m.scale_max)
            } else {
                m.scale_min
            };
            let dx = symmetric(rng, m.max_shift) * w as f64;
            let dy = symmetric(rng, m.max_shift) * h as f64;
            warp_affine(image, angle, scale, dx, dy)
        }
        Transform::GaussNoise => {
            let sigma = rng.gen::<f64>() * m.max_noise_sigma;
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
                let data = image.data().iter().map(|v| v + normal.sample(rng)).collect();
                Tensor::new(image.shape().to_vec(), data)?
            } else {
                image.clone()
            }
        }
        Transform::Clahe => clahe(image, m.clahe_clip, m.clahe_tiles),
        Transform::Sharpen => {
            let alpha = blend(rng, m);
            convolve_blend(image, &[0.0, -1.0, 0.0, -1.0, 5.0, -1.0, 0.0, -1.0, 0.0], alpha)
        }
        Transform::Emboss => {
            let alpha = blend(rng, m);
            convolve_blend(image, &[-2.0, -1.0, 0.0, -1.0, 1.0, 1.0, 0.0, 1.0, 2.0], alpha)
        }
        Transform::BrightnessContrast => {
            let gain = 1.0 + symmetric(rng, m.contrast);
            let bias = symmetric(rng, m.brightness);
            image.map(|v| gain * v + bias)
        }
        Transform::HueSaturation => {
            let hue = symmetric(rng, m.max_hue_deg);
            let sat = 1.0 + symmetric(rng, m.saturation);
            let val = 1.0 + symmetric(rng, m.value);
            hue_saturation(image, hue, sat, val)
        }
    };
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Augments and reports the applied chain (empty when the rate gate declined).
pub fn augment_with_report(image: &Tensor, cfg: &AugmentationConfig, seed: u64) -> Result<(Tensor, Vec<Transform>)> {
    cfg.validate()?;
    check_rgb(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cfg.transforms.is_empty() || rng.gen::<f64>() >= cfg.rate {
        return Ok((image.clone(), Vec::new()));
    }
    let n = rng.gen_range(1..=cfg.max_chain.min(cfg.transforms.len()));
    let chain: Vec<Transform> = cfg.transforms.choose_multiple(&mut rng, n).copied().collect();
    let mut out = image.clone();
    for &t in &chain {
        out = apply_transform(&out, t, &cfg.magnitudes, &mut rng)?;
    }
    Ok((out, chain))
}

pub fn augment(image: &Tensor, cfg: &AugmentationConfig, seed: u64) -> Result<Tensor> {
    Ok(augment_with_report(image, cfg, seed)?.0)
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..=bound)
    } else {
        0.0
    }
}

fn blend(rng: &mut ChaCha8Rng, m: &Magnitudes) -> f64 {
    if m.kernel_alpha_max > m.kernel_alpha_min {
        rng.gen_range(m.kernel_alpha_min..=m.kernel_alpha_max)
    } else {
        m.kernel_alpha_min
    }
}

/// Output pixel `(y, x)` takes input pixel `src(y, x)` in every channel.
fn remap(image: &Tensor, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            for ch in 0..c {
                out[ch * h * w + y * w + x] = d[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Rotation by `angle` and scaling about the centre followed by a shift,
/// sampled bilinearly with edge replication.
fn warp_affine(image: &Tensor, angle: f64, scale: f64, dx: f64, dy: f64) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    let at = |ch: usize, y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        d[ch * h * w + y * w + x]
    };
    for y in 0..h {
        for x in 0..w {
            // invert: undo the shift, then the rotation-scale about the centre
            let (u, v) = ((x as f64 - cx - dx) / scale, (y as f64 - cy - dy) / scale);
            let sx = cos * u + sin * v + cx;
            let sy = -sin * u + cos * v + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = at(ch, y0, x0) * (1.0 - fx) + at(ch, y0, x0 + 1) * fx;
                let bottom = at(ch, y0 + 1, x0) * (1.0 - fx) + at(ch, y0 + 1, x0 + 1) * fx;
                out[ch * h * w + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// `(1 - alpha) x + alpha (k * x)` per channel with a 3x3 kernel and edge replication.
fn convolve_blend(image: &Tensor, k: &[f64; 9], alpha: f64) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = (y + ky).saturating_sub(1).min(h - 1);
                        let sx = (x + kx).saturating_sub(1).min(w - 1);
                        acc += k[ky * 3 + kx] * plane[sy * w + sx];
                    }
                }
                let i = y * w + x;
                out[ch * h * w + i] = (1.0 - alpha) * plane[i] + alpha * acc;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

const LEVELS: usize = 256;

/// Contrast-limited adaptive histogram equalisation of the luma. The luma
/// change is added to every channel so hue is roughly kept.
fn clahe(image: &Tensor, clip: f64, tiles: usize) -> Tensor {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let luma: Vec<f64> = (0..plane)
        .map(|i| (0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]).clamp(0.0, 1.0))
        .collect();
    let bin = |v: f64| ((v * (LEVELS - 1) as f64).round() as usize).min(LEVELS - 1);
    let (gy, gx) = (tiles.min(h).max(1), tiles.min(w).max(1));
    let bounds = |g: usize, n: usize, t: usize| (t * n / g, (t + 1) * n / g);

    let mut maps = vec![[0.0f64; LEVELS]; gy * gx];
    for ty in 0..gy {
        let (y0, y1) = bounds(gy, h, ty);
        for tx in 0..gx {
            let (x0, x1) = bounds(gx, w, tx);
            let mut hist = [0.0f64; LEVELS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin(luma[y * w + x])] += 1.0;
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let limit = (clip * count / LEVELS as f64).max(1.0);
            let excess: f64 = hist.iter().map(|&c| (c - limit).max(0.0)).sum();
            let mut cdf = 0.0;
            let map = &mut maps[ty * gx + tx];
            for (b, c) in hist.iter().enumerate() {
                cdf += c.min(limit) + excess / LEVELS as f64;
                map[b] = cdf / count;
            }
        }
    }

    // each tile's mapping is anchored at its centre and blended bilinearly
    let centre = |g: usize, n: usize, t: usize| {
        let (a, b) = bounds(g, n, t);
        (a + b) as f64 / 2.0 - 0.5
    };
    let neighbours = |g: usize, n: usize, p: usize| -> (usize, usize, f64) {
        let p = p as f64;
        if p <= centre(g, n, 0) {
            return (0, 0, 0.0);
        }
        if p >= centre(g, n, g - 1) {
            return (g - 1, g - 1, 0.0);
        }
        let t = (0..g - 1).find(|&t| p < centre(g, n, t + 1)).unwrap_or(g - 2);
        let (c0, c1) = (centre(g, n, t), centre(g, n, t + 1));
        (t, t + 1, (p - c0) / (c1 - c0))
    };
    let mut out = d.to_vec();
    for y in 0..h {
        let (ty0, ty1, fy) = neighbours(gy, h, y);
        for x in 0..w {
            let (tx0, tx1, fx) = neighbours(gx, w, x);
            let b = bin(luma[y * w + x]);
            let m = |ty: usize, tx: usize| maps[ty * gx + tx][b];
            let top = m(ty0, tx0) * (1.0 - fx) + m(ty0, tx1) * fx;
            let bottom = m(ty1, tx0) * (1.0 - fx) + m(ty1, tx1) * fx;
            let delta = top * (1.0 - fy) + bottom * fy - luma[y * w + x];
            for ch in 0..3 {
                out[ch * plane + y * w + x] += delta;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

fn hue_saturation(image: &Tensor, hue_deg: f64, sat: f64, val: f64) -> Tensor {
    let s = image.shape();
    let plane = s[1] * s[2];
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for i in 0..plane {
        let (hh, ss, vv) = rgb_to_hsv(d[i], d[plane + i], d[2 * plane + i]);
        let (r, g, b) = hsv_to_rgb(
            (hh + hue_deg).rem_euclid(360.0),
            (ss * sat).clamp(0.0, 1.0),
            (vv * val).clamp(0.0, 1.0),
        );
        out[i] = r;
        out[plane + i] = g;
        out[2 * plane + i] = b;
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Hue in degrees, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max > 0.0 { delta / max } else { 0.0 };
    (hue, sat, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}
