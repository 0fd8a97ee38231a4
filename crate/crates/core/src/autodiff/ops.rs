use std::rc::Rc;

use rayon::prelude::*;

use super::{col2im, gemm, im2col, permute_indices, ConvGeom, GradSink, Graph, MatRef, Var};
use crate::error::{Error, Result};
use crate::nn::activations::{gelu_derivative, gelu_scalar, sigmoid_scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Sigmoid,
    Exp,
    Square,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Gelu => gelu_scalar(x),
            Unary::Sigmoid => sigmoid_scalar(x),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Gelu => gelu_derivative(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
        }
    }
}

pub(crate) enum Op {
    Leaf {
        trainable: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    /// `x + b` where `b`'s shape is a suffix of `x`'s.
    AddSuffix(Var, Var),
    /// `[N, C, ...] + [C]`.
    AddChannel(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        groups: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropyLogits {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

impl Op {
    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddSuffix(a, b) | Op::AddChannel(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::AddScalar(x) | Op::Unary(x, _) | Op::Reshape(x) => vec![*x],
            Op::Sum(x) | Op::Mean(x) | Op::Softmax(x) => vec![*x],
            Op::Gather { x, .. } | Op::MaxPool2d { x, .. } | Op::MeanAxis { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, gamma, beta, .. }
            | Op::BatchNormTrain { x, gamma, beta, .. }
            | Op::BatchNormEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropyLogits { logits, .. } => vec![*logits],
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(format!(
            "{what} expects rank {rank}, got {shape:?}"
        )));
    }
    Ok(())
}

impl Graph {
    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        va.zip_map(&vb, f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    fn unary(&self, x: Var, u: Unary) -> Var {
        let out = self.value(x).map(|v| u.apply(v));
        self.push(out, Op::Unary(x, u))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Adds `b` broadcast over the leading axes of `x`.
    pub fn add_suffix(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (sx, sb) = (vx.shape(), vb.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!(
                "cannot broadcast {sb:?} over {sx:?}"
            )));
        }
        let m = vb.len();
        let mut out = vx.as_ref().clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vb.data()[i % m];
        }
        Ok(self.push(out, Op::AddSuffix(x, b)))
    }

    /// Adds a per-channel vector to a `[N, C, ...]` tensor.
    pub fn add_channel(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let sx = vx.shape();
        if sx.len() < 2 || vb.shape() != [sx[1]] {
            return Err(Error::shape(format!(
                "channel bias {:?} does not match {sx:?}",
                vb.shape()
            )));
        }
        let (_, c, inner) = split_axis(sx, 1);
        let mut out = vx.as_ref().clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vb.data()[(i / inner) % c];
        }
        Ok(self.push(out, Op::AddChannel(x, b)))
    }

    /// `[..., m, k] x [..., k, n]` with equal batch axes, or `[..., m, k] x [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (va, vb) = (&*va, &*vb);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul needs rank >= 2 operands"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; out_shape.iter().product()];
        if sb.len() == 2 {
            let rows = va.len() / k;
            gemm(
                MatRef::new(va.data(), rows, k),
                MatRef::new(vb.data(), k, n),
                &mut out,
                0.0,
            );
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape(format!("matmul batch axes {sa:?} x {sb:?}")));
            }
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
                gemm(
                    MatRef::new(&va.data()[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::new(&vb.data()[i * k * n..(i + 1) * k * n], k, n),
                    c,
                    0.0,
                );
            });
        }
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b)))
    }

    /// `x · w + b` over the last axis, with `w: [in, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_suffix(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).as_ref().clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Output element `i` is input element `index[i]` (flat indexing).
    pub fn gather(&self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if index.iter().any(|&i| i >= vx.len()) {
            return Err(Error::shape("gather index out of range"));
        }
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if perm.len() != shape.len() {
            return Err(Error::shape(format!("permutation {perm:?} for {shape:?}")));
        }
        let (idx, out_shape) = permute_indices(&shape, perm);
        self.gather(x, Rc::new(idx), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat axis out of range"));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("concat {base:?} with {s:?}")));
            }
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out_shape = base.to_vec();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// NCHW convolution; `w: [C_out, C_in / groups, k, k]`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        groups: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (vx, vw) = (&*vx, &*vw);
        check_rank(vx.shape(), 4, "conv2d input")?;
        check_rank(vw.shape(), 4, "conv2d weight")?;
        let [n, cin, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [cout, cin_g, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(format!(
                "conv2d weight {:?} incompatible with {cin} input channels in {groups} groups",
                vw.shape()
            )));
        }
        if kh != geom.kernel || kw != geom.kernel {
            return Err(Error::shape("conv2d kernel size disagrees with geometry"));
        }
        let (Some(oh), Some(ow)) = (geom.conv_out(h), geom.conv_out(wd)) else {
            return Err(Error::shape(format!(
                "kernel {} does not fit {h}x{wd}",
                geom.kernel
            )));
        };
        let bias = b.map(|b| self.value(b));
        let bias = bias.as_deref();
        if let Some(bv) = bias {
            if bv.shape() != [cout] {
                return Err(Error::shape("conv2d bias length"));
            }
        }
        let cout_g = cout / groups;
        let kk = cin_g * geom.kernel * geom.kernel;
        let plane = oh * ow;
        let mut out = vec![0.0; n * cout * plane];
        out.par_chunks_mut(cout * plane)
            .enumerate()
            .for_each(|(s, out_s)| {
                let mut cols = vec![0.0; kk * plane];
                let img = &vx.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
                for g in 0..groups {
                    im2col(
                        &img[g * cin_g * h * wd..(g + 1) * cin_g * h * wd],
                        cin_g,
                        h,
                        wd,
                        geom,
                        oh,
                        ow,
                        &mut cols,
                    );
                    gemm(
                        MatRef::new(&vw.data()[g * cout_g * kk..(g + 1) * cout_g * kk], cout_g, kk),
                        MatRef::new(&cols, kk, plane),
                        &mut out_s[g * cout_g * plane..(g + 1) * cout_g * plane],
                        0.0,
                    );
                }
                if let Some(bv) = bias {
                    for (c, chunk) in out_s.chunks_mut(plane).enumerate() {
                        let bc = bv.data()[c];
                        chunk.iter_mut().for_each(|v| *v += bc);
                    }
                }
            });
        Ok(self.push(
            Tensor::new(vec![n, cout, oh, ow], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                groups,
            },
        ))
    }

    /// NCHW transposed convolution; `w: [C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (vx, vw) = (&*vx, &*vw);
        check_rank(vx.shape(), 4, "conv_transpose2d input")?;
        check_rank(vw.shape(), 4, "conv_transpose2d weight")?;
        let [n, cin, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [wcin, cout, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
        if wcin != cin || kh != geom.kernel || kw != geom.kernel {
            return Err(Error::shape(format!(
                "conv_transpose2d weight {:?} for input {:?}",
                vw.shape(),
                vx.shape()
            )));
        }
        let (Some(oh), Some(ow)) = (geom.transpose_out(h), geom.transpose_out(wd)) else {
            return Err(Error::shape("transposed convolution output is empty"));
        };
        let bias = b.map(|b| self.value(b));
        let bias = bias.as_deref();
        if let Some(bv) = bias {
            if bv.shape() != [cout] {
                return Err(Error::shape("conv_transpose2d bias length"));
            }
        }
        let kk = cout * geom.kernel * geom.kernel;
        let plane_in = h * wd;
        let plane_out = oh * ow;
        let mut out = vec![0.0; n * cout * plane_out];
        out.par_chunks_mut(cout * plane_out)
            .enumerate()
            .for_each(|(s, out_s)| {
                let mut cols = vec![0.0; kk * plane_in];
                gemm(
                    MatRef::new(vw.data(), cin, kk).t(),
                    MatRef::new(&vx.data()[s * cin * plane_in..(s + 1) * cin * plane_in], cin, plane_in),
                    &mut cols,
                    0.0,
                );
                col2im(&cols, cout, oh, ow, geom, h, wd, out_s);
                if let Some(bv) = bias {
                    for (c, chunk) in out_s.chunks_mut(plane_out).enumerate() {
                        let bc = bv.data()[c];
                        chunk.iter_mut().for_each(|v| *v += bc);
                    }
                }
            });
        Ok(self.push(
            Tensor::new(vec![n, cout, oh, ow], out)?,
            Op::ConvTranspose2d { x, w, b, geom },
        ))
    }

    /// Max pooling without padding; trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        check_rank(vx.shape(), 4, "max_pool2d input")?;
        let [n, c, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        if h < kernel || w < kernel || stride == 0 {
            return Err(Error::shape(format!("pool {kernel} does not fit {h}x{w}")));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if vx.data()[i] > best {
                                best = vx.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool2d { x, argmax },
        ))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::shape("mean axis out of range"));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &vx.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let mut out = vx.as_ref().clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Normalises over `axis`, with per-feature affine `gamma`, `beta` of that axis' length.
    pub fn layer_norm(&self, x: Var, axis: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::shape("layer_norm axis out of range"));
        }
        let (outer, d, inner) = split_axis(vx.shape(), axis);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape("layer_norm affine length"));
        }
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; outer * inner];
        let mut out = vec![0.0; vx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * d + l) * inner + i;
                let mean = (0..d).map(|l| vx.data()[at(l)]).sum::<f64>() / d as f64;
                let var = (0..d)
                    .map(|l| (vx.data()[at(l)] - mean).powi(2))
                    .sum::<f64>()
                    / d as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for l in 0..d {
                    let xh = (vx.data()[at(l)] - mean) * r;
                    xhat[at(l)] = xh;
                    out[at(l)] = xh * vg.data()[l] + vb.data()[l];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vx.shape().to_vec(), out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    /// Batch normalisation with batch statistics over `(N, H, W)`.
    /// Also returns the batch mean and biased variance per channel.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let vx = self.value(x);
        check_rank(vx.shape(), 4, "batch_norm input")?;
        let (n, c, plane) = split_axis(&[vx.shape()[0], vx.shape()[1], vx.shape()[2] * vx.shape()[3]], 1);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::shape("batch_norm affine length"));
        }
        let m = (n * plane) as f64;
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                means[ch] += vx.data()[base..base + plane].iter().sum::<f64>();
            }
        }
        means.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                vars[ch] += vx.data()[base..base + plane]
                    .iter()
                    .map(|v| (v - means[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        vars.iter_mut().for_each(|v| *v /= m);
        let rstd: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (i / plane) % c;
            *xh = (vx.data()[i] - means[ch]) * rstd[ch];
            *o = *xh * vg.data()[ch] + vb.data()[ch];
        }
        let var = self.push(
            Tensor::new(vx.shape().to_vec(), out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        );
        Ok((var, means, vars))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let vx = self.value(x);
        check_rank(vx.shape(), 4, "batch_norm input")?;
        let c = vx.shape()[1];
        let plane = vx.shape()[2] * vx.shape()[3];
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c] || running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape("batch_norm statistics length"));
        }
        let mean = running_mean.data().to_vec();
        let rstd: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let out = Tensor::from_fn(vx.shape().to_vec(), |i| {
            let ch = (i / plane) % c;
            (vx.data()[i] - mean[ch]) * rstd[ch] * vg.data()[ch] + vb.data()[ch]
        });
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    /// Mean negative log-softmax likelihood of `labels` under `logits: [B, K]`.
    pub fn cross_entropy_logits(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        check_rank(vl.shape(), 2, "cross_entropy logits")?;
        let (b, k) = (vl.shape()[0], vl.shape()[1]);
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
        }
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("label out of range"));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared difference.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(&vb)?;
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / va.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b)))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn backward(op: &Op, out: &Tensor, g: &Tensor, sink: &mut GradSink<'_>) {
    let gd = g.data();
    match op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            sink.add(*a, gd.to_vec());
            sink.add(*b, gd.to_vec());
        }
        Op::Sub(a, b) => {
            sink.add(*a, gd.to_vec());
            sink.add(*b, gd.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (sink.value(*a), sink.value(*b));
            sink.add(*a, gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect());
            sink.add(*b, gd.iter().zip(va.data()).map(|(g, x)| g * x).collect());
        }
        Op::Scale(x, c) => sink.add(*x, gd.iter().map(|v| v * c).collect()),
        Op::AddScalar(x) | Op::Reshape(x) => sink.add(*x, gd.to_vec()),
        Op::Unary(x, u) => {
            let vx = sink.value(*x);
            let d = gd
                .iter()
                .zip(vx.data().iter().zip(out.data()))
                .map(|(g, (&xi, &yi))| g * u.derivative(xi, yi))
                .collect();
            sink.add(*x, d);
        }
        Op::AddSuffix(x, b) => {
            sink.add(*x, gd.to_vec());
            if sink.wants(*b) {
                let m = sink.value(*b).len();
                let mut db = vec![0.0; m];
                for (i, v) in gd.iter().enumerate() {
                    db[i % m] += v;
                }
                sink.add(*b, db);
            }
        }
        Op::AddChannel(x, b) => {
            sink.add(*x, gd.to_vec());
            if sink.wants(*b) {
                let (_, c, inner) = split_axis(out.shape(), 1);
                let mut db = vec![0.0; c];
                for (i, v) in gd.iter().enumerate() {
                    db[(i / inner) % c] += v;
                }
                sink.add(*b, db);
            }
        }
        Op::MatMul(a, b) => matmul_backward(*a, *b, g, sink),
        Op::Gather { x, index } => {
            if sink.wants(*x) {
                let mut dx = vec![0.0; sink.value(*x).len()];
                for (gi, &src) in gd.iter().zip(index.iter()) {
                    dx[src] += gi;
                }
                sink.add(*x, dx);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = sink.value(p).shape()[*axis];
                if sink.wants(p) {
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dp.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    sink.add(p, dp);
                }
                offset += len;
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            groups,
        } => conv2d_backward(*x, *w, *b, *geom, *groups, g, sink),
        Op::ConvTranspose2d { x, w, b, geom } => conv_transpose2d_backward(*x, *w, *b, *geom, g, sink),
        Op::MaxPool2d { x, argmax } => {
            if sink.wants(*x) {
                let mut dx = vec![0.0; sink.value(*x).len()];
                for (gi, &src) in gd.iter().zip(argmax) {
                    dx[src] += gi;
                }
                sink.add(*x, dx);
            }
        }
        Op::MeanAxis { x, axis } => {
            let shape = sink.value(*x).shape().to_vec();
            let (outer, len, inner) = split_axis(&shape, *axis);
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        dx[(o * len + l) * inner + i] = gd[o * inner + i] / len as f64;
                    }
                }
            }
            sink.add(*x, dx);
        }
        Op::Sum(x) => {
            let n = sink.value(*x).len();
            sink.add(*x, vec![gd[0]; n]);
        }
        Op::Mean(x) => {
            let n = sink.value(*x).len();
            sink.add(*x, vec![gd[0] / n as f64; n]);
        }
        Op::Softmax(x) => {
            let d = *out.shape().last().unwrap();
            let mut dx = vec![0.0; out.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(gd.chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((o, y), g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            sink.add(*x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            rstd,
        } => {
            let (outer, d, inner) = split_axis(out.shape(), *axis);
            let vg = sink.value(*gamma);
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut dx = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * d + l) * inner + i;
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for l in 0..d {
                        let gi = gd[at(l)];
                        dgamma[l] += gi * xhat[at(l)];
                        dbeta[l] += gi;
                        let dxh = gi * vg.data()[l];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[at(l)];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    let r = rstd[o * inner + i];
                    for l in 0..d {
                        let dxh = gd[at(l)] * vg.data()[l];
                        dx[at(l)] = r * (dxh - mean_dxh - xhat[at(l)] * mean_dxh_xh);
                    }
                }
            }
            sink.add(*x, dx);
            sink.add(*gamma, dgamma);
            sink.add(*beta, dbeta);
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let s = out.shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let m = (n * plane) as f64;
            let vg = sink.value(*gamma);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (i, gi) in gd.iter().enumerate() {
                let ch = (i / plane) % c;
                dgamma[ch] += gi * xhat[i];
                dbeta[ch] += gi;
            }
            if sink.wants(*x) {
                let dx = (0..out.len())
                    .map(|i| {
                        let ch = (i / plane) % c;
                        vg.data()[ch] * rstd[ch] / m
                            * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                    })
                    .collect();
                sink.add(*x, dx);
            }
            sink.add(*gamma, dgamma);
            sink.add(*beta, dbeta);
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let s = out.shape();
            let (c, plane) = (s[1], s[2] * s[3]);
            let vx = sink.value(*x);
            let vg = sink.value(*gamma);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; out.len()];
            for (i, gi) in gd.iter().enumerate() {
                let ch = (i / plane) % c;
                dgamma[ch] += gi * (vx.data()[i] - mean[ch]) * rstd[ch];
                dbeta[ch] += gi;
                dx[i] = gi * vg.data()[ch] * rstd[ch];
            }
            sink.add(*x, dx);
            sink.add(*gamma, dgamma);
            sink.add(*beta, dbeta);
        }
        Op::CrossEntropyLogits {
            logits,
            labels,
            probs,
        } => {
            let b = labels.len();
            let k = probs.len() / b;
            let scale = gd[0] / b as f64;
            let mut d = probs.clone();
            for (row, &label) in d.chunks_mut(k).zip(labels) {
                row[label] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            sink.add(*logits, d);
        }
        Op::Mse(a, b) => {
            let (va, vb) = (sink.value(*a), sink.value(*b));
            let scale = 2.0 * gd[0] / va.len() as f64;
            let diff: Vec<f64> = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| scale * (x - y))
                .collect();
            sink.add(*b, diff.iter().map(|v| -v).collect());
            sink.add(*a, diff);
        }
    }
}

fn matmul_backward(a: Var, b: Var, g: &Tensor, sink: &mut GradSink<'_>) {
    let (va, vb) = (sink.value(a), sink.value(b));
    let (va, vb) = (&*va, &*vb);
    let (sa, sb) = (va.shape(), vb.shape());
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    if sb.len() == 2 {
        let rows = va.len() / k;
        if sink.wants(a) {
            let mut da = vec![0.0; va.len()];
            gemm(
                MatRef::new(g.data(), rows, n),
                MatRef::new(vb.data(), k, n).t(),
                &mut da,
                0.0,
            );
            sink.add(a, da);
        }
        if sink.wants(b) {
            let mut db = vec![0.0; vb.len()];
            gemm(
                MatRef::new(va.data(), rows, k).t(),
                MatRef::new(g.data(), rows, n),
                &mut db,
                0.0,
            );
            sink.add(b, db);
        }
        return;
    }
    if sink.wants(a) {
        let mut da = vec![0.0; va.len()];
        da.par_chunks_mut(m * k).enumerate().for_each(|(i, d)| {
            gemm(
                MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n),
                MatRef::new(&vb.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                d,
                0.0,
            );
        });
        sink.add(a, da);
    }
    if sink.wants(b) {
        let mut db = vec![0.0; vb.len()];
        db.par_chunks_mut(k * n).enumerate().for_each(|(i, d)| {
            gemm(
                MatRef::new(&va.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n),
                d,
                0.0,
            );
        });
        sink.add(b, db);
    }
}

/// Per-channel sums of a `[N, C, plane]` gradient.
fn channel_sums(gd: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for (i, chunk) in gd.chunks(plane).enumerate() {
        db[i % c] += chunk.iter().sum::<f64>();
    }
    db
}

/// Sums per-sample partial results in sample order, keeping the reduction deterministic.
fn ordered_sum(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(&p) {
            *t += v;
        }
    }
    total
}

fn conv2d_backward(
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    groups: usize,
    g: &Tensor,
    sink: &mut GradSink<'_>,
) {
    let (vx, vw) = (sink.value(x), sink.value(w));
    let (vx, vw) = (&*vx, &*vw);
    let [n, cin, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
    let [cout, cin_g, _, _] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let plane = oh * ow;
    let cout_g = cout / groups;
    let kk = cin_g * geom.kernel * geom.kernel;
    let want_x = sink.wants(x);
    let want_w = sink.wants(w);

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let img = &vx.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
            let gs = &g.data()[s * cout * plane..(s + 1) * cout * plane];
            let mut dw = if want_w { vec![0.0; vw.len()] } else { vec![] };
            let mut dx = if want_x { vec![0.0; cin * h * wd] } else { vec![] };
            let mut cols = vec![0.0; kk * plane];
            for grp in 0..groups {
                let g_out = &gs[grp * cout_g * plane..(grp + 1) * cout_g * plane];
                if want_w {
                    im2col(
                        &img[grp * cin_g * h * wd..(grp + 1) * cin_g * h * wd],
                        cin_g,
                        h,
                        wd,
                        geom,
                        oh,
                        ow,
                        &mut cols,
                    );
                    gemm(
                        MatRef::new(g_out, cout_g, plane),
                        MatRef::new(&cols, kk, plane).t(),
                        &mut dw[grp * cout_g * kk..(grp + 1) * cout_g * kk],
                        0.0,
                    );
                }
                if want_x {
                    gemm(
                        MatRef::new(&vw.data()[grp * cout_g * kk..(grp + 1) * cout_g * kk], cout_g, kk).t(),
                        MatRef::new(g_out, cout_g, plane),
                        &mut cols,
                        0.0,
                    );
                    col2im(
                        &cols,
                        cin_g,
                        h,
                        wd,
                        geom,
                        oh,
                        ow,
                        &mut dx[grp * cin_g * h * wd..(grp + 1) * cin_g * h * wd],
                    );
                }
            }
            (dw, dx)
        })
        .collect();

    let (dws, dxs): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    if want_x {
        sink.add(x, dxs.concat());
    }
    if want_w {
        sink.add(w, ordered_sum(dws, vw.len()));
    }
    if let Some(b) = b {
        sink.add(b, channel_sums(g.data(), cout, plane));
    }
}

fn conv_transpose2d_backward(
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    g: &Tensor,
    sink: &mut GradSink<'_>,
) {
    let (vx, vw) = (sink.value(x), sink.value(w));
    let (vx, vw) = (&*vx, &*vw);
    let [n, cin, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
    let cout = vw.shape()[1];
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let kk = cout * geom.kernel * geom.kernel;
    let plane_in = h * wd;
    let plane_out = oh * ow;
    let want_x = sink.wants(x);
    let want_w = sink.wants(w);

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let gs = &g.data()[s * cout * plane_out..(s + 1) * cout * plane_out];
            let xs = &vx.data()[s * cin * plane_in..(s + 1) * cin * plane_in];
            let mut cols = vec![0.0; kk * plane_in];
            im2col(gs, cout, oh, ow, geom, h, wd, &mut cols);
            let mut dx = vec![];
            if want_x {
                dx = vec![0.0; cin * plane_in];
                gemm(
                    MatRef::new(vw.data(), cin, kk),
                    MatRef::new(&cols, kk, plane_in),
                    &mut dx,
                    0.0,
                );
            }
            let mut dw = vec![];
            if want_w {
                dw = vec![0.0; vw.len()];
                gemm(
                    MatRef::new(xs, cin, plane_in),
                    MatRef::new(&cols, kk, plane_in).t(),
                    &mut dw,
                    0.0,
                );
            }
            (dw, dx)
        })
        .collect();

    let (dws, dxs): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    if want_x {
        sink.add(x, dxs.concat());
    }
    if want_w {
        sink.add(w, ordered_sum(dws, vw.len()));
    }
    if let Some(b) = b {
        sink.add(b, channel_sums(g.data(), cout, plane_out));
    }
}
