//! Slide-level multiple-instance heads over latent slides, and their training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::evaluation::{classification_metrics, MetricReport};
use crate::heads::smoothed_cross_entropy;
use crate::nn::{Conv2d, Ctx, Group, Init, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{rng_from, tag, Rng};
use crate::tensor::Tensor;

/// Smallest latent side the two stride-2 stages accept.
pub const MIN_LATENT_SIDE: usize = 4;
pub const MIN_RESIZE_SIDE: usize = 32;
pub const MAX_RESIZE_SIDE: usize = 224;
const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MilHeadKind {
    MaxPool,
    Abmil,
}

impl MilHeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MilHeadKind::MaxPool => "maxpool",
            MilHeadKind::Abmil => "abmil",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilHeadConfig {
    pub kind: MilHeadKind,
    pub in_channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Width of the attention scoring layer; unused by the max-pool head.
    #[serde(default = "default_hidden")]
    pub attention_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    32
}
fn default_classes() -> usize {
    2
}
fn default_dropout() -> f64 {
    0.1
}
fn default_slope() -> f64 {
    0.01
}

impl MilHeadConfig {
    pub fn new(kind: MilHeadKind, in_channels: usize, hidden_dim: usize, classes: usize) -> Self {
        Self {
            kind,
            in_channels,
            hidden_dim,
            classes,
            attention_dim: default_hidden(),
            dropout: default_dropout(),
            leaky_slope: default_slope(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden_dim == 0 || self.attention_dim == 0 {
            return Err(invalid!("MIL head widths must be positive"));
        }
        if self.classes < 2 {
            return Err(invalid!("MIL head needs at least 2 classes, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Shared trunk (1x1 reduce, two stride-2 stages), a pooling stage, one hidden layer
/// and a classifier. The pooling stage is a global max or attention pooling.
#[derive(Clone, Debug)]
pub struct MilHead {
    pub cfg: MilHeadConfig,
    reduce: Conv2d,
    down: [Conv2d; 2],
    attention: Option<(Linear, Linear)>,
    hidden: Linear,
    classifier: Linear,
}

pub struct MilOutput {
    /// `[B, K]`.
    pub logits: Var,
    /// `[B, h*w]` attention weights over the trunk output, for the attention head.
    pub attention: Option<Var>,
}

impl MilHead {
    pub fn new(cfg: &MilHeadConfig, store: &mut ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(&[cfg.seed, tag("mil"), tag(cfg.kind.as_str())]);
        let g = Group::Shared;
        let k = Init::KaimingNormal { gain: core::f64::consts::SQRT_2 };
        let reduce = Conv2d::new(store, "mil.reduce", cfg.in_channels, 16, 1, 1, 0, k, g, &mut rng);
        let down = [
            Conv2d::new(store, "mil.down1", 16, 32, 3, 2, 1, k, g, &mut rng),
            Conv2d::new(store, "mil.down2", 32, 64, 3, 2, 1, k, g, &mut rng),
        ];
        let attention = (cfg.kind == MilHeadKind::Abmil).then(|| {
            let lin = Init::KaimingNormal { gain: 1.0 };
            (
                Linear::new(store, "mil.attention.v", 64, cfg.attention_dim, true, lin, g, &mut rng),
                Linear::new(store, "mil.attention.w", cfg.attention_dim, 1, false, lin, g, &mut rng),
            )
        });
        let hidden = Linear::new(store, "mil.hidden", 64, cfg.hidden_dim, true, k, g, &mut rng);
        let classifier = Linear::new(store, "mil.classifier", cfg.hidden_dim, cfg.classes, true, k, g, &mut rng);
        Ok(Self { cfg: cfg.clone(), reduce, down, attention, hidden, classifier })
    }

    /// `x [B, C, H, W]` with `H, W >= 4`.
    pub fn forward(&self, ctx: &mut Ctx<'_, f32>, x: Var) -> Result<MilOutput> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "MIL head expects [B, {}, H, W] latents, got {s:?}",
                self.cfg.in_channels
            )));
        }
        if s[2] < MIN_LATENT_SIDE || s[3] < MIN_LATENT_SIDE {
            return Err(invalid!(
                "latent {}x{} too small: both sides must be at least {MIN_LATENT_SIDE} so two stride-2 stages keep a cell",
                s[2],
                s[3]
            ));
        }
        let h = self.trunk(ctx, x);
        let (pooled, attention) = self.pool(ctx, h);
        Ok(MilOutput { logits: self.classify(ctx, pooled), attention })
    }

    /// `[B, C, H, W] -> [B, 64, ceil(H/4), ceil(W/4)]`.
    pub fn trunk(&self, ctx: &mut Ctx<'_, f32>, x: Var) -> Var {
        let mut h = self.reduce.forward(ctx, x);
        for conv in &self.down {
            h = conv.forward(ctx, h);
            h = ctx.tape.instance_norm(h, INSTANCE_NORM_EPS);
            h = ctx.tape.leaky_relu(h, self.cfg.leaky_slope);
            h = ctx.spatial_dropout(h, self.cfg.dropout);
        }
        h
    }

    /// Global max, or attention pooling `sum softmax(w^T tanh(V h)) h`; returns `[B, 64]`
    /// and, for attention, the `[B, h*w]` weights.
    pub fn pool(&self, ctx: &mut Ctx<'_, f32>, h: Var) -> (Var, Option<Var>) {
        let (b, c, hh, ww) = ctx.tape.value(h).dims4();
        match &self.attention {
            None => (ctx.tape.global_max_pool(h), None),
            Some((v, w)) => {
                let feats = ctx.tape.reshape(h, &[b, c, hh * ww]);
                let rows = ctx.tape.permute(feats, &[0, 2, 1]);
                let e = v.forward(ctx, rows);
                let e = ctx.tape.tanh(e);
                let e = w.forward(ctx, e);
                let e = ctx.tape.reshape(e, &[b, hh * ww]);
                let a = ctx.tape.softmax_last(e);
                let a3 = ctx.tape.reshape(a, &[b, 1, hh * ww]);
                let p = ctx.tape.bmm(a3, feats, false, true);
                (ctx.tape.reshape(p, &[b, c]), Some(a))
            }
        }
    }

    pub fn classify(&self, ctx: &mut Ctx<'_, f32>, pooled: Var) -> Var {
        let z = self.hidden.forward(ctx, pooled);
        let z = ctx.tape.leaky_relu(z, self.cfg.leaky_slope);
        self.classifier.forward(ctx, z)
    }
}

/// A head together with its parameters.
#[derive(Clone, Debug)]
pub struct MilModel {
    pub head: MilHead,
    pub store: ParamStore<f32>,
}

impl MilModel {
    pub fn new(cfg: &MilHeadConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let head = MilHead::new(cfg, &mut store)?;
        Ok(Self { head, store })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    fn check_latent(&self, latent: &Tensor<f32>) -> Result<()> {
        let s = latent.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("latent must be [C, H, W], got {s:?}")));
        }
        if s[0] != self.head.cfg.in_channels {
            return Err(invalid!(
                "latent has {} channels but the head expects {}",
                s[0],
                self.head.cfg.in_channels
            ));
        }
        Ok(())
    }

    /// Inference logits and, for the attention head, the `h x w` attention map.
    pub fn infer(&self, latent: &Tensor<f32>) -> Result<(Vec<f32>, Option<Tensor<f32>>)> {
        self.check_latent(latent)?;
        let s = latent.shape();
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.input(latent.clone().reshaped(&[1, s[0], s[1], s[2]]));
        let out = self.head.forward(&mut ctx, x)?;
        let logits = ctx.tape.value(out.logits).data().to_vec();
        let att = out.attention.map(|a| {
            let (h, w) = (s[1].div_ceil(4), s[2].div_ceil(4));
            ctx.tape.value(a).clone().reshaped(&[h, w])
        });
        Ok((logits, att))
    }

    pub fn logits(&self, latent: &Tensor<f32>) -> Result<Vec<f32>> {
        Ok(self.infer(latent)?.0)
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = logits.iter().map(|&v| libm::exp(v as f64 - m)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    HFlip,
    VFlip,
    Resize(usize),
}

/// Nearest-neighbour resize of `[C, H, W]`; source index `floor(dst * in / out)`.
pub fn resize_nearest(latent: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (latent.shape()[0], latent.shape()[1], latent.shape()[2]);
    let src = latent.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let xs: Vec<usize> = (0..out_w).map(|x| x * w / out_w).collect();
    for k in 0..c {
        for y in 0..out_h {
            let row = &src[(k * h + y * h / out_h) * w..][..w];
            out.extend(xs.iter().map(|&x| row[x]));
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out).expect("resize shape")
}

fn flip(latent: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let (c, h, w) = (latent.shape()[0], latent.shape()[1], latent.shape()[2]);
    let src = latent.data();
    let mut out = Vec::with_capacity(src.len());
    for k in 0..c {
        for y in 0..h {
            let sy = if horizontal { y } else { h - 1 - y };
            let row = &src[(k * h + sy) * w..][..w];
            if horizontal {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::from_vec(latent.shape(), out).expect("flip shape")
}

/// Applies one latent-space augmentation; `Resize(s)` produces an `s x s` latent.
pub fn augment_latent(latent: &Tensor<f32>, op: AugmentOp) -> Result<Tensor<f32>> {
    if latent.rank() != 3 {
        return Err(Error::Shape(format!("latent must be [C, H, W], got {:?}", latent.shape())));
    }
    Ok(match op {
        AugmentOp::HFlip => flip(latent, true),
        AugmentOp::VFlip => flip(latent, false),
        AugmentOp::Resize(s) => {
            if !(MIN_RESIZE_SIDE..=MAX_RESIZE_SIDE).contains(&s) {
                return Err(invalid!("resize side {s} outside [{MIN_RESIZE_SIDE}, {MAX_RESIZE_SIDE}]"));
            }
            resize_nearest(latent, s, s)
        }
    })
}

/// Integer nearest-neighbour upscaling until the shorter side reaches `min_side`.
pub fn fit_min_side(latent: &Tensor<f32>, min_side: usize) -> Tensor<f32> {
    let (h, w) = (latent.shape()[1], latent.shape()[2]);
    let short = h.min(w);
    if short >= min_side {
        return latent.clone();
    }
    let f = min_side.div_ceil(short);
    resize_nearest(latent, h * f, w * f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub resize_prob: f64,
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, resize_prob: 0.5, min_side: MIN_RESIZE_SIDE, max_side: MAX_RESIZE_SIDE }
    }
}

/// Random flips and resize drawn from `cfg`.
pub fn random_augment(latent: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    let mut t = latent.clone();
    if rng.random_bool(cfg.flip_prob) {
        t = augment_latent(&t, AugmentOp::HFlip)?;
    }
    if rng.random_bool(cfg.flip_prob) {
        t = augment_latent(&t, AugmentOp::VFlip)?;
    }
    if rng.random_bool(cfg.resize_prob) {
        let s = rng.random_range(cfg.min_side..=cfg.max_side);
        t = augment_latent(&t, AugmentOp::Resize(s))?;
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilTrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub label_smoothing: f64,
    pub augment: AugmentConfig,
    /// Latents shorter than this are upscaled before the head, in training and evaluation.
    pub eval_min_side: usize,
    pub seed: u64,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            optimizer: AdamWConfig { lr: 1e-4, weight_decay: 0.01, ..AdamWConfig::default() },
            label_smoothing: 0.1,
            augment: AugmentConfig::default(),
            eval_min_side: MIN_RESIZE_SIDE,
            seed: 0,
        }
    }
}

impl MilTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid!("label smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        let a = &self.augment;
        if a.min_side < MIN_RESIZE_SIDE || a.max_side > MAX_RESIZE_SIDE || a.min_side > a.max_side {
            return Err(invalid!(
                "augment sides [{}, {}] must lie within [{MIN_RESIZE_SIDE}, {MAX_RESIZE_SIDE}]",
                a.min_side,
                a.max_side
            ));
        }
        for p in [a.flip_prob, a.resize_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("augment probabilities must lie in [0, 1], got {p}"));
            }
        }
        if self.eval_min_side < MIN_LATENT_SIDE {
            return Err(invalid!("eval_min_side must be at least {MIN_LATENT_SIDE}"));
        }
        Ok(())
    }
}

/// One slide as seen by a MIL head.
#[derive(Clone, Debug, PartialEq)]
pub struct MilExample {
    pub slide_id: String,
    /// `[C, H, W]`.
    pub latent: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MilTrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: MilModel,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
    pub history: Vec<EpochLog>,
}

/// Mean smoothed cross-entropy over `set` in inference mode.
pub fn mil_loss(model: &MilModel, set: &[MilExample], eps: f64, min_side: usize) -> Result<f64> {
    let mut total = 0.0;
    for ex in set {
        let logits = model.logits(&fit_min_side(&ex.latent, min_side))?;
        let t = Tensor::from_vec(&[1, logits.len()], logits)?;
        total += smoothed_cross_entropy(&t, &[ex.label], eps)?;
    }
    Ok(total / set.len() as f64)
}

fn check_sets(model: &MilModel, train: &[MilExample], val: &[MilExample]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(invalid!("MIL training needs non-empty train and validation sets"));
    }
    for ex in train.iter().chain(val) {
        model.check_latent(&ex.latent)?;
        if ex.label >= model.head.cfg.classes {
            return Err(Error::LabelOutOfRange { label: ex.label, classes: model.head.cfg.classes });
        }
    }
    if let Some(dup) = train.iter().find(|t| val.iter().any(|v| v.slide_id == t.slide_id)) {
        return Err(invalid!("slide `{}` is in both the train and validation sets", dup.slide_id));
    }
    Ok(())
}

/// Trains for all epochs, one optimizer step per slide, and returns the checkpoint
/// with the lowest validation loss (earliest on ties).
pub fn train_mil_head(head: &MilHeadConfig, train: &[MilExample], val: &[MilExample], cfg: &MilTrainConfig) -> Result<MilTrainOutcome> {
    cfg.validate()?;
    let mut model = MilModel::new(head)?;
    check_sets(&model, train, val)?;
    let mut opt = AdamW::new(cfg.optimizer, &model.store);
    let mut rng = rng_from(&[cfg.seed, tag("mil-train")]);
    let eps = cfg.label_smoothing;
    let initial_val_loss = mil_loss(&model, val, eps, cfg.eval_min_side)?;
    let mut best = (0usize, f64::INFINITY, model.store.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let ex = &train[i];
            let x = fit_min_side(&random_augment(&ex.latent, &cfg.augment, &mut rng)?, cfg.eval_min_side);
            let s = x.shape().to_vec();
            let (loss, tape, grads) = {
                let mut ctx = Ctx::training(&model.store, &mut rng);
                let xv = ctx.input(x.reshaped(&[1, s[0], s[1], s[2]]));
                let out = model.head.forward(&mut ctx, xv)?;
                let l = ctx.tape.cross_entropy(out.logits, &[ex.label], eps);
                let value = ctx.tape.item(l) as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("MIL loss on slide `{}` at epoch {epoch}", ex.slide_id)));
                }
                let g = ctx.tape.backward(l);
                (value, ctx.tape, g)
            };
            model.store.accumulate(&tape, &grads);
            opt.step(&mut model.store);
            train_loss += loss;
        }
        let val_loss = mil_loss(&model, val, eps, cfg.eval_min_side)?;
        history.push(EpochLog { epoch, train_loss: train_loss / train.len() as f64, val_loss });
        if val_loss < best.1 {
            best = (epoch, val_loss, model.store.clone());
        }
    }
    model.store = best.2;
    Ok(MilTrainOutcome { model, best_epoch: best.0, best_val_loss: best.1, initial_val_loss, history })
}

/// Class probabilities for each slide.
pub fn predict_proba(model: &MilModel, set: &[MilExample], min_side: usize) -> Result<Vec<Vec<f64>>> {
    set.iter().map(|ex| Ok(softmax(&model.logits(&fit_min_side(&ex.latent, min_side))?))).collect()
}

pub fn evaluate_mil(model: &MilModel, set: &[MilExample], min_side: usize) -> Result<MetricReport> {
    let probs = predict_proba(model, set, min_side)?;
    let y_true: Vec<usize> = set.iter().map(|e| e.label).collect();
    let y_pred: Vec<usize> = probs
        .iter()
        .map(|p| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0))
        .collect();
    classification_metrics(&y_true, &y_pred, Some(&probs))
}
