//! The hybrid head's backbones: a ConvNeXt-like CNN producing a feature map,
//! a 1×1 token projection, and a Swin-like windowed transformer pooling the
//! tokens to one vector.
//!
//! Both are simplified stand-ins with the interface shapes of their
//! namesakes: no stochastic depth or layer scale, one MLP ratio everywhere.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{BackboneConfig, BackboneKind};
use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerNorm, Linear, ParamStore};
use crate::tensor::Tensor;

/// Additive mask for attention between tokens of different shifted regions.
const MASK_VALUE: f64 = -100.0;

#[derive(Clone, Debug)]
struct ConvNextBlock {
    dwconv: Conv2d,
    norm: LayerNorm,
    pw1: Conv2d,
    pw2: Conv2d,
}

impl ConvNextBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, ratio: usize) -> Result<Self> {
        let point = ConvGeom::new(1, 1, 0);
        Ok(ConvNextBlock {
            dwconv: Conv2d::new(store, rng, &format!("{name}.dwconv"), c, c, ConvGeom::new(7, 1, 3), c, true)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            pw1: Conv2d::new(store, rng, &format!("{name}.pw1"), c, ratio * c, point, 1, true)?,
            pw2: Conv2d::new(store, rng, &format!("{name}.pw2"), ratio * c, c, point, 1, true)?,
        })
    }

    fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.dwconv.forward(g, store, x)?;
        let h = self.norm.forward(g, store, h, 1)?;
        let h = g.gelu(self.pw1.forward(g, store, h)?);
        let h = self.pw2.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct ConvNextStage {
    downsample: Option<(LayerNorm, Conv2d)>,
    blocks: Vec<ConvNextBlock>,
}

/// Patchify stem followed by stages of depthwise 7×7 / inverted-bottleneck blocks.
#[derive(Clone, Debug)]
pub struct ConvNextLike {
    cfg: BackboneConfig,
    stem: Conv2d,
    stem_norm: LayerNorm,
    stages: Vec<ConvNextStage>,
}

impl ConvNextLike {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind != BackboneKind::ConvnextLike {
            return Err(Error::invalid("expected a convnext_like config"));
        }
        let w0 = cfg.widths[0];
        let stem = Conv2d::new(
            store,
            rng,
            &format!("{prefix}.stem"),
            in_channels,
            w0,
            ConvGeom::new(cfg.patch, cfg.patch, 0),
            1,
            true,
        )?;
        let stem_norm = LayerNorm::new(store, &format!("{prefix}.stem_norm"), w0)?;
        let mut stages = Vec::new();
        for (i, (&w, &depth)) in cfg.widths.iter().zip(&cfg.depths).enumerate() {
            let name = format!("{prefix}.stage{i}");
            let downsample = if i == 0 {
                None
            } else {
                let prev = cfg.widths[i - 1];
                Some((
                    LayerNorm::new(store, &format!("{name}.down_norm"), prev)?,
                    Conv2d::new(store, rng, &format!("{name}.down"), prev, w, ConvGeom::new(2, 2, 0), 1, true)?,
                ))
            };
            let blocks = (0..depth)
                .map(|b| ConvNextBlock::new(store, rng, &format!("{name}.block{b}"), w, cfg.mlp_ratio))
                .collect::<Result<_>>()?;
            stages.push(ConvNextStage { downsample, blocks });
        }
        Ok(ConvNextLike {
            cfg: cfg.clone(),
            stem,
            stem_norm,
            stages,
        })
    }

    /// `[B, C, S, S]` to the final-stage feature map `[B, C', S', S']`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::shape(format!("backbone expects square NCHW input, got {shape:?}")));
        }
        self.cfg.convnext_output_side(shape[2])?;
        let mut h = self.stem.forward(g, store, x)?;
        h = self.stem_norm.forward(g, store, h, 1)?;
        for stage in &self.stages {
            if let Some((norm, conv)) = &stage.downsample {
                h = norm.forward(g, store, h, 1)?;
                h = conv.forward(g, store, h)?;
            }
            for block in &stage.blocks {
                h = block.forward(g, store, h)?;
            }
        }
        Ok(h)
    }
}

/// 1×1 projection of a feature map to a token sequence.
#[derive(Clone, Debug)]
pub struct HybridEmbed {
    proj: Conv2d,
    pub dim: usize,
}

impl HybridEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_channels: usize, dim: usize) -> Result<Self> {
        let proj = Conv2d::new(store, rng, name, in_channels, dim, ConvGeom::new(1, 1, 0), 1, true)?;
        Ok(HybridEmbed { proj, dim })
    }

    pub fn weight_name(&self) -> &str {
        self.proj.weight_name()
    }

    /// `[B, C, H, W]` to tokens `[B, H·W, dim]` in row-major spatial order.
    pub fn forward(&self, g: &Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let s = g.shape(features);
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::shape(format!("hybrid embed expects NCHW features, got {s:?}")));
        }
        let y = self.proj.forward(g, store, features)?;
        let y = g.reshape(y, &[s[0], self.dim, s[2] * s[3]])?;
        g.transpose_last(y)
    }
}

#[derive(Clone, Debug)]
struct WindowAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    bias_table: String,
    heads: usize,
}

#[derive(Clone, Debug)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shift: bool,
}

#[derive(Clone, Debug)]
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

#[derive(Clone, Debug)]
struct SwinStage {
    merge: Option<PatchMerging>,
    blocks: Vec<SwinBlock>,
    width: usize,
}

/// Shifted-window transformer over a square token grid.
#[derive(Clone, Debug)]
pub struct SwinLike {
    cfg: BackboneConfig,
    stages: Vec<SwinStage>,
    norm: LayerNorm,
}

/// Index map from windowed layout `[B·nW, N, E]` into `[B, side², E]`, after a
/// cyclic shift of the grid by `shift` towards the origin.
fn window_index(batch: usize, side: usize, window: usize, shift: usize, dim: usize) -> Vec<usize> {
    let per_row = side / window;
    let mut idx = Vec::with_capacity(batch * side * side * dim);
    for b in 0..batch {
        for wy in 0..per_row {
            for wx in 0..per_row {
                for ty in 0..window {
                    for tx in 0..window {
                        let y = (wy * window + ty + shift) % side;
                        let x = (wx * window + tx + shift) % side;
                        let base = ((b * side + y) * side + x) * dim;
                        idx.extend(base..base + dim);
                    }
                }
            }
        }
    }
    idx
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (i, &j) in index.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Gather index for the relative position bias `[heads, N, N]` out of a
/// `[(2w−1)², heads]` table.
fn relative_bias_index(window: usize, heads: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
                let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
                idx.push((dy as usize * span + dx as usize) * heads + h);
            }
        }
    }
    idx
}

/// `[nW, heads, N, N]` mask that blocks attention across the seams a cyclic
/// shift introduces.
fn shift_mask(side: usize, window: usize, shift: usize, heads: usize) -> Tensor {
    let region = |p: usize| {
        if p < side - window {
            0
        } else if p < side - shift {
            1
        } else {
            2
        }
    };
    let per_row = side / window;
    let n = window * window;
    let mut data = Vec::with_capacity(per_row * per_row * heads * n * n);
    for wy in 0..per_row {
        for wx in 0..per_row {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let y = wy * window + t / window;
                    let x = wx * window + t % window;
                    region(y) * 3 + region(x)
                })
                .collect();
            for _ in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        data.push(if labels[i] == labels[j] { 0.0 } else { MASK_VALUE });
                    }
                }
            }
        }
    }
    Tensor::new(vec![per_row * per_row, heads, n, n], data).expect("mask shape")
}

impl WindowAttention {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let bias_table = format!("{name}.relative_bias");
        let span = 2 * window - 1;
        let table = Tensor::from_fn(vec![span * span, heads], |_| rng.gen_range(-0.02..0.02));
        store.insert(&bias_table, table, true)?;
        Ok(WindowAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim)?,
            bias_table,
            heads,
        })
    }

    /// Attention within windows; `x` is `[B·nW, N, E]`, `mask` `[nW, heads, N, N]`.
    fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Var,
        window: usize,
        mask: Option<Tensor>,
        capture: &mut Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let s = g.shape(x);
        let (bw, n, e) = (s[0], s[1], s[2]);
        let hd = e / self.heads;
        let split = |t: Var| -> Result<Var> {
            let t = g.reshape(t, &[bw, n, self.heads, hd])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = split(self.q.forward(g, store, x)?)?;
        let k = split(self.k.forward(g, store, x)?)?;
        let v = split(self.v.forward(g, store, x)?)?;
        let scores = g.matmul(q, g.transpose_last(k)?)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let table = g.param(store, &self.bias_table)?;
        let bias = g.gather(table, Rc::new(relative_bias_index(window, self.heads)), &[self.heads, n, n])?;
        let mut scores = g.add_suffix(scores, bias)?;
        if let Some(mask) = mask {
            let nw = mask.shape()[0];
            let grouped = g.reshape(scores, &[bw / nw, nw, self.heads, n, n])?;
            let masked = g.add_suffix(grouped, g.constant(mask))?;
            scores = g.reshape(masked, &[bw, self.heads, n, n])?;
        }
        let attn = g.softmax(scores)?;
        if let Some(sink) = capture.as_deref_mut() {
            sink.push(attn);
        }
        let out = g.matmul(attn, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[bw, n, e])?;
        self.proj.forward(g, store, out)
    }
}

impl SwinBlock {
    fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Var,
        side: usize,
        window: usize,
        capture: &mut Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let s = g.shape(x);
        let (batch, e) = (s[0], s[2]);
        // a single window covering the grid needs no shift
        let shift = if self.shift && side > window { window / 2 } else { 0 };
        let fwd = window_index(batch, side, window, shift, e);
        let back = invert(&fwd);
        let nw = (side / window) * (side / window);
        let n = window * window;

        let h = self.norm1.forward(g, store, x, 2)?;
        let h = g.gather(h, Rc::new(fwd), &[batch * nw, n, e])?;
        let mask = (shift > 0).then(|| shift_mask(side, window, shift, self.attn.heads));
        let h = self.attn.forward(g, store, h, window, mask, capture)?;
        let h = g.gather(h, Rc::new(back), &[batch, side * side, e])?;
        let x = g.add(x, h)?;

        let h = self.norm2.forward(g, store, x, 2)?;
        let h = g.gelu(self.fc1.forward(g, store, h)?);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}

impl PatchMerging {
    /// `[B, side², E]` to `[B, (side/2)², 2E]`.
    fn forward(&self, g: &Graph, store: &ParamStore, x: Var, side: usize) -> Result<Var> {
        let s = g.shape(x);
        let (batch, e) = (s[0], s[2]);
        let half = side / 2;
        let mut idx = Vec::with_capacity(batch * side * side * e);
        for b in 0..batch {
            for i in 0..half {
                for j in 0..half {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let base = ((b * side + 2 * i + dy) * side + 2 * j + dx) * e;
                        idx.extend(base..base + e);
                    }
                }
            }
        }
        let h = g.gather(x, Rc::new(idx), &[batch, half * half, 4 * e])?;
        let h = self.norm.forward(g, store, h, 2)?;
        self.reduction.forward(g, store, h)
    }
}

impl SwinLike {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind != BackboneKind::SwinLike {
            return Err(Error::invalid("expected a swin_like config"));
        }
        let mut stages = Vec::new();
        for (i, ((&w, &depth), &heads)) in cfg.widths.iter().zip(&cfg.depths).zip(&cfg.heads).enumerate() {
            let name = format!("{prefix}.stage{i}");
            let merge = if i == 0 {
                None
            } else {
                let prev = cfg.widths[i - 1];
                Some(PatchMerging {
                    norm: LayerNorm::new(store, &format!("{name}.merge_norm"), 4 * prev)?,
                    reduction: Linear::new(store, rng, &format!("{name}.merge"), 4 * prev, w)?,
                })
            };
            let mut blocks = Vec::new();
            for b in 0..depth {
                let bn = format!("{name}.block{b}");
                blocks.push(SwinBlock {
                    norm1: LayerNorm::new(store, &format!("{bn}.norm1"), w)?,
                    attn: WindowAttention::new(store, rng, &format!("{bn}.attn"), w, heads, cfg.window)?,
                    norm2: LayerNorm::new(store, &format!("{bn}.norm2"), w)?,
                    fc1: Linear::new(store, rng, &format!("{bn}.fc1"), w, cfg.mlp_ratio * w)?,
                    fc2: Linear::new(store, rng, &format!("{bn}.fc2"), cfg.mlp_ratio * w, w)?,
                    shift: b % 2 == 1,
                });
            }
            stages.push(SwinStage { merge, blocks, width: w });
        }
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cfg.output_width())?;
        Ok(SwinLike {
            cfg: cfg.clone(),
            stages,
            norm,
        })
    }

    /// Tokens `[B, side², E]` to pooled features `[B, E']`. Attention
    /// probabilities `[B·nW, heads, N, N]` of every block are pushed to `capture`.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        tokens: Var,
        side: usize,
        mut capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[1] != side * side || s[2] != self.cfg.widths[0] {
            return Err(Error::shape(format!(
                "swin expects [B, {}, {}] tokens, got {s:?}",
                side * side,
                self.cfg.widths[0]
            )));
        }
        self.cfg.check_swin_grid(side)?;
        let mut x = tokens;
        let mut side = side;
        for stage in &self.stages {
            if let Some(merge) = &stage.merge {
                x = merge.forward(g, store, x, side)?;
                side /= 2;
            }
            debug_assert_eq!(g.shape(x)[2], stage.width);
            for block in &stage.blocks {
                x = block.forward(g, store, x, side, self.cfg.window, &mut capture)?;
            }
        }
        let x = self.norm.forward(g, store, x, 2)?;
        g.mean_axis(x, 1)
    }
}

/// ConvNeXt-like features, projected to tokens, pooled by the Swin-like transformer.
#[derive(Clone, Debug)]
pub struct HybridBackbone {
    pub convnext: ConvNextLike,
    pub embed: HybridEmbed,
    pub swin: SwinLike,
}

impl HybridBackbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        convnext: &BackboneConfig,
        swin: &BackboneConfig,
    ) -> Result<Self> {
        let cnn = ConvNextLike::new(store, rng, &format!("{prefix}.convnext"), in_channels, convnext)?;
        let embed = HybridEmbed::new(store, rng, &format!("{prefix}.embed"), convnext.output_width(), swin.widths[0])?;
        let tr = SwinLike::new(store, rng, &format!("{prefix}.swin"), swin)?;
        Ok(HybridBackbone {
            convnext: cnn,
            embed,
            swin: tr,
        })
    }

    pub fn output_width(&self) -> usize {
        self.swin.cfg.output_width()
    }

    /// `[B, C, S, S]` images to `[B, D]` feature vectors.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var, capture: Option<&mut Vec<Var>>) -> Result<Var> {
        let fmap = self.convnext.forward(g, store, x)?;
        let side = g.shape(fmap)[2];
        let tokens = self.embed.forward(g, store, fmap)?;
        self.swin.forward(g, store, tokens, side, capture)
    }
}
