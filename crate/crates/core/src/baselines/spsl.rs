//! Phase-spectrum channel: the image rebuilt from its Fourier phase alone.
//!
//! Discarding the magnitude keeps edge and structure cues while removing
//! global brightness, which forgery traces in the upsampling of generators
//! tend to survive.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bins whose magnitude is at most this fraction of the largest one carry no
/// usable phase and are dropped.
const PHASE_FLOOR: f64 = 1e-12;

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// `[H, W]` map of the inverse transform of the unit-magnitude spectrum of
/// the luma of a `[3, H, W]` image, min-max scaled to `[0, 1]` (a flat map
/// becomes all zeros).
pub fn phase_map(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("phase features need even sides, got {h}x{w}")));
    }
    let plane = h * w;
    let d = image.data();
    let mut spec: Vec<Complex<f64>> = (0..plane)
        .map(|i| Complex::new(0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i], 0.0))
        .collect();
    fft2(&mut spec, h, w, false);
    let peak = spec.iter().map(|c| c.norm()).fold(0.0, f64::max);
    for c in spec.iter_mut() {
        let m = c.norm();
        *c = if m > PHASE_FLOOR * peak { *c / m } else { Complex::new(0.0, 0.0) };
    }
    fft2(&mut spec, h, w, true);
    let real: Vec<f64> = spec.iter().map(|c| c.re / plane as f64).collect();
    let (lo, hi) = real
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let scaled = if span > PHASE_FLOOR * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE) {
        real.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; plane]
    };
    Tensor::new(vec![h, w], scaled)
}

/// Appends the phase map as a fourth channel: `[3, H, W]` to `[4, H, W]`.
pub fn spsl_phase_features(image: &Tensor) -> Result<Tensor> {
    let phase = phase_map(image)?;
    let mut data = image.data().to_vec();
    data.extend_from_slice(phase.data());
    let s = image.shape();
    Tensor::new(vec![4, s[1], s[2]], data)
}

/// Batched form over `[B, 3, H, W]`.
pub fn spsl_phase_features_batch(images: &Tensor) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::shape("expected a [B, 3, H, W] batch"));
    }
    let items = (0..images.shape()[0])
        .map(|i| spsl_phase_features(&images.index_axis0(i)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}
