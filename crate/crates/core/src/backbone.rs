//! Shared image encoder producing a four-level feature pyramid.
//!
//! Two variants with the same interface:
//! - `Conv`: pre-norm 3x3 residual blocks, strided 2x2 convolutions between stages.
//! - `Attention`: non-overlapping windowed multi-head self-attention blocks with
//!   patch merging between stages.
//!
//! Level `i` has stride `2^(i+2)` and `embed_dim / 8 * 2^i` channels.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, Ctx, Group, Init, Linear, Norm, ParamSpan, ParamStore};
use crate::real::Real;
use crate::rng::{rng_from, tag, Rng};

const LN_EPS: f64 = 1e-6;
const HEAD_DIM: usize = 8;
const MAX_WINDOW: usize = 7;
const MLP_RATIO: usize = 4;
const ATTN_INIT: Init = Init::TruncNormal { std: 0.02 };

const INPUT_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Attention,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub input_size: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { variant: Variant::Conv, embed_dim: 64, depths: [1, 1, 2, 1], input_size: 224, seed: 0 }
    }
}

impl BackboneConfig {
    /// Full-width encoder used for parameter reporting only.
    pub fn full_scale(variant: Variant) -> Self {
        Self { variant, embed_dim: 768, depths: [2, 2, 6, 2], input_size: 224, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 8 != 0 {
            return Err(invalid!("embed_dim must be a positive multiple of 8, got {}", self.embed_dim));
        }
        if self.depths.contains(&0) {
            return Err(invalid!("every stage depth must be positive, got {:?}", self.depths));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(invalid!("input_size must be a positive multiple of 32, got {}", self.input_size));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 4] {
        let c0 = self.embed_dim / 8;
        [c0, 2 * c0, 4 * c0, 8 * c0]
    }

    pub fn strides(&self) -> [usize; 4] {
        [4, 8, 16, 32]
    }
}

/// Pyramid levels as NCHW nodes plus the pooled deepest level `[B, embed_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
    pub pooled: Var,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    norm: Norm,
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

#[derive(Clone, Debug)]
enum Down {
    Conv { norm: Norm, conv: Conv2d },
    Merge { norm: Norm, reduce: Linear },
}

#[derive(Clone, Debug)]
enum Stage {
    Conv(Vec<ConvBlock>),
    Attn(Vec<AttnBlock>),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: Conv2d,
    stem_norm: Norm,
    downs: Vec<Down>,
    stages: Vec<Stage>,
    span: ParamSpan,
}

fn heads_for(c: usize) -> usize {
    if c % HEAD_DIM == 0 {
        c / HEAD_DIM
    } else {
        1
    }
}

/// Largest window side not above 7 that tiles `side` exactly.
pub fn window_for(side: usize) -> usize {
    (1..=MAX_WINDOW.min(side)).rev().find(|w| side % w == 0).unwrap_or(1)
}

impl Backbone {
    /// Creates the encoder parameters in `store` (group `Shared`).
    pub fn new<R: Real>(cfg: &BackboneConfig, store: &mut ParamStore<R>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(&[cfg.seed, tag("backbone")]);
        let start = store.len();
        let ch = cfg.channels();
        let g = Group::Shared;
        let (stem_init, is_attn) = match cfg.variant {
            Variant::Conv => (Init::RELU, false),
            Variant::Attention => (ATTN_INIT, true),
        };
        let stem = Conv2d::new(store, "backbone.stem", 3, ch[0], 4, 4, 0, stem_init, g, &mut rng);
        let stem_norm = Norm::new(store, "backbone.stem_norm", ch[0], LN_EPS, g, &mut rng);
        let mut downs = Vec::new();
        let mut stages = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            if i > 0 {
                let p = ch[i - 1];
                let name = format!("backbone.down{i}");
                downs.push(if is_attn {
                    Down::Merge {
                        norm: Norm::new(store, &format!("{name}.norm"), 4 * p, LN_EPS, g, &mut rng),
                        reduce: Linear::new(store, &format!("{name}.reduce"), 4 * p, c, false, ATTN_INIT, g, &mut rng),
                    }
                } else {
                    Down::Conv {
                        norm: Norm::new(store, &format!("{name}.norm"), p, LN_EPS, g, &mut rng),
                        conv: Conv2d::new(store, &format!("{name}.conv"), p, c, 2, 2, 0, Init::RELU, g, &mut rng),
                    }
                });
            }
            let blocks = 0..cfg.depths[i];
            stages.push(if is_attn {
                Stage::Attn(blocks.map(|j| AttnBlock::new(store, &format!("backbone.stage{i}.{j}"), c, &mut rng)).collect())
            } else {
                Stage::Conv(blocks.map(|j| ConvBlock::new(store, &format!("backbone.stage{i}.{j}"), c, &mut rng)).collect())
            });
        }
        Ok(Self { cfg: cfg.clone(), stem, stem_norm, downs, stages, span: store.span_since(start) })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn span(&self) -> ParamSpan {
        self.span
    }

    pub fn count_parameters<R: Real>(&self, store: &ParamStore<R>) -> usize {
        store.count_span(self.span)
    }

    /// Runs the encoder on `x [B, 3, S, S]`, where `S` is the configured input size.
    pub fn forward_pyramid<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Result<FeaturePyramid> {
        let s = self.cfg.input_size;
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!("encoder expects input [B, 3, {s}, {s}], got {shape:?}")));
        }
        if !ctx.tape.value(x).all_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let b = shape[0];
        let mut levels = Vec::with_capacity(4);
        // fixed input standardization around mid-grey
        let x = ctx.tape.affine(x, 1.0 / INPUT_STD, -0.5 / INPUT_STD);
        let mut h = self.stem.forward(ctx, x);
        h = self.stem_norm.channels(ctx, h);
        match self.cfg.variant {
            Variant::Conv => {
                for (i, stage) in self.stages.iter().enumerate() {
                    if i > 0 {
                        let Down::Conv { norm, conv } = &self.downs[i - 1] else { unreachable!() };
                        h = norm.channels(ctx, h);
                        h = conv.forward(ctx, h);
                    }
                    let Stage::Conv(blocks) = stage else { unreachable!() };
                    for blk in blocks {
                        h = blk.forward(ctx, h);
                    }
                    levels.push(h);
                }
            }
            Variant::Attention => {
                // tokens are kept channel-last, [B, H, W, C]
                let mut t = ctx.tape.permute(h, &[0, 2, 3, 1]);
                for (i, stage) in self.stages.iter().enumerate() {
                    if i > 0 {
                        let Down::Merge { norm, reduce } = &self.downs[i - 1] else { unreachable!() };
                        t = merge_patches(ctx, t, norm, reduce);
                    }
                    let Stage::Attn(blocks) = stage else { unreachable!() };
                    for blk in blocks {
                        t = blk.forward(ctx, t);
                    }
                    levels.push(ctx.tape.permute(t, &[0, 3, 1, 2]));
                }
            }
        }
        let ch = self.cfg.channels();
        for (i, &lv) in levels.iter().enumerate() {
            let side = s >> (i + 2);
            assert_eq!(ctx.tape.shape(lv), &[b, ch[i], side, side], "pyramid level {i} shape");
        }
        let pooled = ctx.tape.global_avg_pool(levels[3]);
        Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2], levels[3]], pooled })
    }

    /// `[B, embed_dim]` spatial mean of the deepest level.
    pub fn pooled_embedding<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        Ok(self.forward_pyramid(ctx, x)?.pooled)
    }
}

impl ConvBlock {
    fn new<R: Real>(store: &mut ParamStore<R>, name: &str, c: usize, rng: &mut Rng) -> Self {
        let g = Group::Shared;
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), c, LN_EPS, g, rng),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, Init::RELU, g, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, Init::RELU, g, rng),
        }
    }

    fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Var {
        let h = self.norm.channels(ctx, x);
        let h = self.conv1.forward(ctx, h);
        let h = ctx.tape.gelu(h);
        let h = self.conv2.forward(ctx, h);
        ctx.tape.add(x, h)
    }
}

impl AttnBlock {
    fn new<R: Real>(store: &mut ParamStore<R>, name: &str, c: usize, rng: &mut Rng) -> Self {
        let g = Group::Shared;
        let lin = |store: &mut ParamStore<R>, part: &str, i: usize, o: usize, rng: &mut Rng| {
            Linear::new(store, &format!("{name}.{part}"), i, o, true, ATTN_INIT, g, rng)
        };
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), c, LN_EPS, g, rng),
            q: lin(store, "q", c, c, rng),
            k: lin(store, "k", c, c, rng),
            v: lin(store, "v", c, c, rng),
            proj: lin(store, "proj", c, c, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), c, LN_EPS, g, rng),
            fc1: lin(store, "fc1", c, MLP_RATIO * c, rng),
            fc2: lin(store, "fc2", MLP_RATIO * c, c, rng),
            heads: heads_for(c),
        }
    }

    fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Var {
        let [b, h, w, c] = <[usize; 4]>::try_from(ctx.tape.shape(x)).expect("tokens [B, H, W, C]");
        let win = window_for(h).min(window_for(w));
        let (nh, nw) = (h / win, w / win);
        let t = win * win;
        let nwin = b * nh * nw;
        let heads = self.heads;
        let hd = c / heads;

        let y = self.norm1.last_axis(ctx, x);
        let y = ctx.tape.reshape(y, &[b, nh, win, nw, win, c]);
        let y = ctx.tape.permute(y, &[0, 1, 3, 2, 4, 5]);
        let y = ctx.tape.reshape(y, &[nwin, t, c]);
        let split = |ctx: &mut Ctx<'_, R>, lin: &Linear| {
            let z = lin.forward(ctx, y);
            let z = ctx.tape.reshape(z, &[nwin, t, heads, hd]);
            let z = ctx.tape.permute(z, &[0, 2, 1, 3]);
            ctx.tape.reshape(z, &[nwin * heads, t, hd])
        };
        let q = split(ctx, &self.q);
        let k = split(ctx, &self.k);
        let v = split(ctx, &self.v);
        let scores = ctx.tape.bmm(q, k, false, true);
        let scores = ctx.tape.scale(scores, 1.0 / libm::sqrt(hd as f64));
        let attn = ctx.tape.softmax_last(scores);
        let o = ctx.tape.bmm(attn, v, false, false);
        let o = ctx.tape.reshape(o, &[nwin, heads, t, hd]);
        let o = ctx.tape.permute(o, &[0, 2, 1, 3]);
        let o = ctx.tape.reshape(o, &[nwin, t, c]);
        let o = self.proj.forward(ctx, o);
        let o = ctx.tape.reshape(o, &[b, nh, nw, win, win, c]);
        let o = ctx.tape.permute(o, &[0, 1, 3, 2, 4, 5]);
        let o = ctx.tape.reshape(o, &[b, h, w, c]);
        let x = ctx.tape.add(x, o);

        let y = self.norm2.last_axis(ctx, x);
        let y = self.fc1.forward(ctx, y);
        let y = ctx.tape.gelu(y);
        let y = self.fc2.forward(ctx, y);
        ctx.tape.add(x, y)
    }
}

/// `[B, H, W, C] -> [B, H/2, W/2, C']` by concatenating each 2x2 neighbourhood.
fn merge_patches<R: Real>(ctx: &mut Ctx<'_, R>, x: Var, norm: &Norm, reduce: &Linear) -> Var {
    let [b, h, w, c] = <[usize; 4]>::try_from(ctx.tape.shape(x)).expect("tokens [B, H, W, C]");
    let y = ctx.tape.reshape(x, &[b, h / 2, 2, w / 2, 2, c]);
    let y = ctx.tape.permute(y, &[0, 1, 3, 2, 4, 5]);
    let y = ctx.tape.reshape(y, &[b, h / 2, w / 2, 4 * c]);
    let y = norm.last_axis(ctx, y);
    reduce.forward(ctx, y)
}

/// Encoder together with its own parameter store.
#[derive(Clone, Debug)]
pub struct Encoder<R: Real> {
    pub backbone: Backbone,
    pub store: ParamStore<R>,
}

/// Seeded initialization; the same config always yields bit-identical parameters.
pub fn init_weights<R: Real>(cfg: &BackboneConfig) -> Result<Encoder<R>> {
    let mut store = ParamStore::new();
    let backbone = Backbone::new(cfg, &mut store)?;
    Ok(Encoder { backbone, store })
}

impl<R: Real> Encoder<R> {
    pub fn count_parameters(&self) -> usize {
        self.backbone.count_parameters(&self.store)
    }

    pub fn freeze(&mut self) {
        self.store.set_span_frozen(self.backbone.span(), true);
    }

    /// Inference-mode pooled embeddings of a `[B, 3, S, S]` batch.
    pub fn embed(&self, batch: crate::tensor::Tensor<R>) -> Result<crate::tensor::Tensor<R>> {
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.input(batch);
        let p = self.backbone.pooled_embedding(&mut ctx, x)?;
        Ok(ctx.tape.value(p).clone())
    }
}
