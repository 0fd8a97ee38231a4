//! Separable bilinear resampling with half-pixel centres.
//!
//! Resizing is linear, so it is expressed as one interpolation matrix per
//! axis; the same matrices drive tensor resizes and the differentiable graph
//! resize.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interpolation matrix `[input_len, output_len]`: column `j` holds the
/// weights that produce output sample `j`.
pub fn bilinear_matrix(input_len: usize, output_len: usize) -> Result<Tensor> {
    if input_len == 0 || output_len == 0 {
        return Err(Error::invalid("resize lengths must be positive"));
    }
    let mut m = Tensor::zeros(vec![input_len, output_len]);
    let scale = input_len as f64 / output_len as f64;
    let last = (input_len - 1) as f64;
    for j in 0..output_len {
        let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input_len - 1);
        let frac = src - lo as f64;
        m.data_mut()[lo * output_len + j] += 1.0 - frac;
        m.data_mut()[hi * output_len + j] += frac;
    }
    Ok(m)
}

/// Resizes the last two axes of `x` (`[..., H, W]`) to `out_h × out_w`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::shape("resize needs rank >= 2"));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let mh = bilinear_matrix(h, out_h)?;
    let mw = bilinear_matrix(w, out_w)?;
    let planes = x.len() / (h * w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut rows = vec![0.0; h * out_w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        // horizontal pass, then vertical
        rows.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            for xi in 0..w {
                let v = src[y * w + xi];
                for j in 0..out_w {
                    rows[y * out_w + j] += v * mw.data()[xi * out_w + j];
                }
            }
        }
        for i in 0..out_h {
            for j in 0..out_w {
                let mut acc = 0.0;
                for y in 0..h {
                    acc += mh.data()[y * out_h + i] * rows[y * out_w + j];
                }
                out.push(acc);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::new(shape, out)
}

/// Differentiable resize of the last two axes of a graph value.
pub fn resize_on_graph(g: &Graph, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() < 2 {
        return Err(Error::shape("resize needs rank >= 2"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x);
    }
    let mw = g.constant(bilinear_matrix(w, out_w)?);
    let mh = g.constant(bilinear_matrix(h, out_h)?);
    let y = g.matmul(x, mw)?;
    let y = g.transpose_last(y)?;
    let y = g.matmul(y, mh)?;
    g.transpose_last(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_sum_to_one() {
        for (a, b) in [(224, 112), (5, 13), (7, 7), (1, 4), (480, 224)] {
            let m = bilinear_matrix(a, b).unwrap();
            for j in 0..b {
                let s: f64 = (0..a).map(|i| m.data()[i * b + j]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn halving_averages_pixel_pairs() {
        let x = Tensor::from_fn(vec![1, 4, 4], |i| i as f64);
        let y = resize_bilinear(&x, 2, 2).unwrap();
        // 2x2 block means of a ramp
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn constant_images_stay_constant() {
        let x = Tensor::full(vec![3, 5, 7], 0.25);
        let y = resize_bilinear(&x, 11, 4).unwrap();
        assert_eq!(y.shape(), &[3, 11, 4]);
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn graph_resize_matches_tensor_resize() {
        let x = Tensor::from_fn(vec![2, 1, 6, 4], |i| ((i * 7) % 11) as f64 / 11.0);
        let g = Graph::new();
        let y = resize_on_graph(&g, g.constant(x.clone()), 3, 5).unwrap();
        let reference = resize_bilinear(&x, 3, 5).unwrap();
        for (a, b) in g.value(y).data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
