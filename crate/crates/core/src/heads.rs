//! Task heads over the shared encoder and their losses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{smoothed_cross_entropy_rows, DiceFocalConfig, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, Ctx, Group, Init, Linear, ParamSpan, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::synthetic::BoxAnnotation;
use crate::tensor::Tensor;

/// Logit bias giving an initial foreground probability of about 0.01.
const PRIOR_BIAS: f64 = -4.6;
pub const DETECTION_STRIDE: usize = 8;

#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub linear: Linear,
    pub dropout_rate: f64,
    pub classes: usize,
    span: ParamSpan,
}

impl ClassificationHead {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, embed_dim: usize, classes: usize, group: Group, rng: &mut Rng) -> Self {
        let start = store.len();
        let linear = Linear::new(store, &format!("{name}.linear"), embed_dim, classes, true, Init::KaimingNormal { gain: 1.0 }, group, rng);
        Self { linear, dropout_rate: 0.2, classes, span: store.span_since(start) }
    }

    pub fn span(&self) -> ParamSpan {
        self.span
    }

    pub fn logits<R: Real>(&self, ctx: &mut Ctx<'_, R>, pooled: Var) -> Var {
        let x = ctx.dropout(pooled, self.dropout_rate);
        self.linear.forward(ctx, x)
    }

    /// Mean cross-entropy of the batch; returns `(loss, logits)`.
    pub fn forward_loss<R: Real>(&self, ctx: &mut Ctx<'_, R>, pooled: Var, labels: &[usize]) -> Result<(Var, Var)> {
        check_labels(labels, self.classes)?;
        let logits = self.logits(ctx, pooled);
        Ok((ctx.tape.cross_entropy(logits, labels, 0.0), logits))
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Cross-entropy against `(1 - epsilon) * onehot + epsilon / K`, averaged over rows.
pub fn smoothed_cross_entropy<R: Real>(logits: &Tensor<R>, labels: &[usize], epsilon: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(invalid!("label smoothing epsilon must lie in [0, 1), got {epsilon}"));
    }
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Shape(format!("expected [{}, K] logits, got {:?}", labels.len(), logits.shape())));
    }
    check_labels(labels, logits.shape()[1])?;
    let (rows, _) = smoothed_cross_entropy_rows(logits, labels, epsilon);
    Ok(rows.iter().map(|v| v.as_f64()).sum::<f64>() / labels.len() as f64)
}

/// Upsampling path from the four pyramid levels to one `D`-channel map at stride 4.
#[derive(Clone, Debug)]
pub struct SharedDecoder {
    fuse2: Conv2d,
    fuse1: Conv2d,
    fuse0: Conv2d,
    out: Conv2d,
    pub out_dim: usize,
    span: ParamSpan,
}

impl SharedDecoder {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, channels: [usize; 4], out_dim: usize, rng: &mut Rng) -> Self {
        let start = store.len();
        let g = Group::Shared;
        let embed = channels[3];
        let (w2, w1) = ((embed / 2).max(1), (embed / 4).max(1));
        let conv = |store: &mut ParamStore<R>, part: &str, i: usize, o: usize, rng: &mut Rng| {
            Conv2d::new(store, &format!("{name}.{part}"), i, o, 3, 1, 1, Init::RELU, g, rng)
        };
        let fuse2 = conv(store, "fuse2", channels[3] + channels[2], w2, rng);
        let fuse1 = conv(store, "fuse1", w2 + channels[1], w1, rng);
        let fuse0 = conv(store, "fuse0", w1 + channels[0], out_dim, rng);
        let out = conv(store, "out", out_dim, out_dim, rng);
        Self { fuse2, fuse1, fuse0, out, out_dim, span: store.span_since(start) }
    }

    pub fn span(&self) -> ParamSpan {
        self.span
    }

    /// `[B, D, S/4, S/4]`.
    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, pyramid: &FeaturePyramid) -> Var {
        let [f0, f1, f2, f3] = pyramid.levels;
        let mut h = f3;
        for (skip, conv) in [(f2, &self.fuse2), (f1, &self.fuse1), (f0, &self.fuse0)] {
            let up = ctx.tape.upsample_nearest(h, 2);
            let cat = ctx.tape.concat_channels(&[up, skip]);
            let y = conv.forward(ctx, cat);
            h = ctx.tape.relu(y);
        }
        let y = self.out.forward(ctx, h);
        ctx.tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub conv: Conv2d,
    pub classes: usize,
    pub loss: DiceFocalConfig,
    span: ParamSpan,
}

impl SegmentationHead {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, in_dim: usize, classes: usize, group: Group, rng: &mut Rng) -> Self {
        let start = store.len();
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_dim, classes, 1, 1, 0, Init::KaimingNormal { gain: 1.0 }, group, rng);
        Self { conv, classes, loss: DiceFocalConfig::default(), span: store.span_since(start) }
    }

    pub fn span(&self) -> ParamSpan {
        self.span
    }

    /// Logits upsampled bilinearly to `out x out`.
    pub fn logits<R: Real>(&self, ctx: &mut Ctx<'_, R>, decoded: Var, out: usize) -> Var {
        let y = self.conv.forward(ctx, decoded);
        ctx.tape.upsample_bilinear(y, out, out)
    }

    /// `target` is a row-major `[B, S, S]` label map; returns `(loss, logits [B, K, S, S])`.
    pub fn forward_loss<R: Real>(&self, ctx: &mut Ctx<'_, R>, decoded: Var, target: &[usize], out: usize) -> Result<(Var, Var)> {
        let b = ctx.tape.shape(decoded)[0];
        if target.len() != b * out * out {
            return Err(Error::Shape(format!("target holds {} labels, expected {b}x{out}x{out}", target.len())));
        }
        check_labels(target, self.classes)?;
        let logits = self.logits(ctx, decoded, out);
        let probs = ctx.tape.softmax_channels(logits);
        Ok((ctx.tape.dice_focal(probs, target, &self.loss), logits))
    }
}

/// Dice + focal of probabilities against a label map, after checking that every pixel's
/// class probabilities sum to one.
pub fn dice_focal_loss<R: Real>(probs: &Tensor<R>, target: &[usize], cfg: &DiceFocalConfig) -> Result<f64> {
    if probs.rank() != 4 {
        return Err(Error::Shape(format!("expected [B, K, H, W] probabilities, got {:?}", probs.shape())));
    }
    let (b, k, h, w) = probs.dims4();
    if target.len() != b * h * w {
        return Err(Error::Shape(format!("target holds {} labels, expected {}", target.len(), b * h * w)));
    }
    check_labels(target, k)?;
    let hw = h * w;
    for bi in 0..b {
        for s in 0..hw {
            let total: f64 = (0..k).map(|c| probs.data()[(bi * k + c) * hw + s].as_f64()).sum();
            if (total - 1.0).abs() > 1e-5 {
                return Err(invalid!("probabilities at sample {bi}, pixel {s} sum to {total}, not 1"));
            }
        }
    }
    let mut tape = crate::autograd::Tape::new();
    let p = tape.constant(probs.clone());
    let l = tape.dice_focal(p, target, cfg);
    Ok(tape.item(l).as_f64())
}

/// Per-location regression and classification targets at one stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FcosTargets {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Class of the assigned box, `None` for background.
    pub class: Vec<Option<usize>>,
    pub centerness: Vec<f64>,
    /// Distances `(l, t, r, b)` to the assigned box.
    pub ltrb: Vec<[f64; 4]>,
}

impl FcosTargets {
    pub fn num_positive(&self) -> usize {
        self.class.iter().filter(|c| c.is_some()).count()
    }
}

/// Image coordinate of grid cell `i` at `stride`.
pub fn location(i: usize, stride: usize) -> f64 {
    (i as f64 + 0.5) * stride as f64
}

/// Assigns each grid location to the smallest box strictly containing it.
pub fn assign_fcos_targets(boxes: &[BoxAnnotation], height: usize, width: usize, stride: usize) -> FcosTargets {
    let n = height * width;
    let mut t = FcosTargets {
        height,
        width,
        stride,
        class: vec![None; n],
        centerness: vec![0.0; n],
        ltrb: vec![[0.0; 4]; n],
    };
    for gy in 0..height {
        let y = location(gy, stride);
        for gx in 0..width {
            let x = location(gx, stride);
            let mut best: Option<(f64, usize)> = None;
            for (bi, b) in boxes.iter().enumerate() {
                let d = [x - b.x_min as f64, y - b.y_min as f64, b.x_max as f64 - x, b.y_max as f64 - y];
                if d.iter().all(|&v| v > 0.0) {
                    let area = b.area() as f64;
                    if best.is_none_or(|(a, _)| area < a) {
                        best = Some((area, bi));
                    }
                }
            }
            if let Some((_, bi)) = best {
                let b = &boxes[bi];
                let d = [x - b.x_min as f64, y - b.y_min as f64, b.x_max as f64 - x, b.y_max as f64 - y];
                let i = gy * width + gx;
                t.class[i] = Some(b.class);
                t.ltrb[i] = d;
                t.centerness[i] = libm::sqrt((d[0].min(d[2]) / d[0].max(d[2])) * (d[1].min(d[3]) / d[1].max(d[3])));
            }
        }
    }
    t
}

/// Raw detection outputs at stride 8.
#[derive(Clone, Copy, Debug)]
pub struct FcosOutput {
    /// `[B, K_det, h, w]` class logits.
    pub cls: Var,
    /// `[B, 1, h, w]` centerness logits.
    pub ctr: Var,
    /// `[B, 4, h, w]` non-negative distances in pixels.
    pub ltrb: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcosLossConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FcosLossConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    tower: Conv2d,
    cls: Conv2d,
    ctr: Conv2d,
    reg: Conv2d,
    pub classes: usize,
    pub loss: FcosLossConfig,
    span: ParamSpan,
}

impl DetectionHead {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, in_dim: usize, classes: usize, group: Group, rng: &mut Rng) -> Self {
        let start = store.len();
        let small = Init::KaimingNormal { gain: 0.1 };
        let tower = Conv2d::new(store, &format!("{name}.tower"), in_dim, in_dim, 3, 2, 1, Init::RELU, group, rng);
        let cls = Conv2d::new(store, &format!("{name}.cls"), in_dim, classes, 3, 1, 1, small, group, rng);
        let ctr = Conv2d::new(store, &format!("{name}.ctr"), in_dim, 1, 3, 1, 1, small, group, rng);
        let reg = Conv2d::new(store, &format!("{name}.reg"), in_dim, 4, 3, 1, 1, small, group, rng);
        let bias = cls.bias.expect("conv bias");
        store.get_mut(bias).value = Tensor::full(&[classes], R::of(PRIOR_BIAS));
        Self { tower, cls, ctr, reg, classes, loss: FcosLossConfig::default(), span: store.span_since(start) }
    }

    pub fn span(&self) -> ParamSpan {
        self.span
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, decoded: Var) -> FcosOutput {
        let t = self.tower.forward(ctx, decoded);
        let t = ctx.tape.relu(t);
        let cls = self.cls.forward(ctx, t);
        let ctr = self.ctr.forward(ctx, t);
        let reg = self.reg.forward(ctx, t);
        let reg = ctx.tape.softplus(reg);
        let ltrb = ctx.tape.scale(reg, DETECTION_STRIDE as f64);
        FcosOutput { cls, ctr, ltrb }
    }

    /// Focal + IoU + centerness BCE, each divided by the positive count (at least 1).
    pub fn loss<R: Real>(&self, ctx: &mut Ctx<'_, R>, out: &FcosOutput, targets: &[FcosTargets]) -> Result<Var> {
        let (b, k, h, w) = ctx.tape.value(out.cls).dims4();
        if targets.len() != b || targets.iter().any(|t| t.height != h || t.width != w) {
            return Err(Error::Shape(format!("need {b} target grids of {h}x{w}")));
        }
        let hw = h * w;
        let mut cls_t = vec![false; b * k * hw];
        let mut pos = vec![false; b * hw];
        let mut ctr_t = vec![R::zero(); b * hw];
        let mut box_t = Tensor::<R>::zeros(&[b, 4, h, w]);
        for (bi, t) in targets.iter().enumerate() {
            for s in 0..hw {
                let Some(c) = t.class[s] else { continue };
                if c >= k {
                    return Err(Error::LabelOutOfRange { label: c, classes: k });
                }
                cls_t[(bi * k + c) * hw + s] = true;
                pos[bi * hw + s] = true;
                ctr_t[bi * hw + s] = R::of(t.centerness[s]);
                for (j, &d) in t.ltrb[s].iter().enumerate() {
                    box_t.data_mut()[(bi * 4 + j) * hw + s] = R::of(d);
                }
            }
        }
        let num_pos = pos.iter().filter(|&&p| p).count().max(1) as f64;
        let focal = ctx.tape.sigmoid_focal_sum(out.cls, &cls_t, self.loss.alpha, self.loss.gamma);
        let iou = ctx.tape.iou_loss_sum(out.ltrb, &box_t, &pos);
        let bce = ctx.tape.bce_logits_sum(out.ctr, &ctr_t, &pos);
        let total = ctx.tape.add_all(&[focal, iou, bce]);
        Ok(ctx.tape.scale(total, 1.0 / num_pos))
    }

    pub fn forward_loss<R: Real>(&self, ctx: &mut Ctx<'_, R>, decoded: Var, boxes: &[Vec<BoxAnnotation>]) -> Result<(Var, FcosOutput)> {
        let out = self.forward(ctx, decoded);
        let (_, _, h, w) = ctx.tape.value(out.cls).dims4();
        let targets: Vec<FcosTargets> = boxes.iter().map(|bx| assign_fcos_targets(bx, h, w, DETECTION_STRIDE)).collect();
        let loss = self.loss(ctx, &out, &targets)?;
        Ok((loss, out))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Boxes whose score `sqrt(sigmoid(cls) * sigmoid(ctr))` reaches `threshold`, for sample `bi`.
pub fn decode_detections<R: Real>(
    cls: &Tensor<R>,
    ctr: &Tensor<R>,
    ltrb: &Tensor<R>,
    bi: usize,
    threshold: f64,
) -> Vec<(BoxAnnotation, f64)> {
    let (_, k, h, w) = cls.dims4();
    let hw = h * w;
    let mut out = Vec::new();
    for s in 0..hw {
        let c_score = sigmoid(ctr.data()[bi * hw + s].as_f64());
        for c in 0..k {
            let score = libm::sqrt(sigmoid(cls.data()[(bi * k + c) * hw + s].as_f64()) * c_score);
            if score < threshold {
                continue;
            }
            let x = location(s % w, DETECTION_STRIDE);
            let y = location(s / w, DETECTION_STRIDE);
            let d = |j: usize| ltrb.data()[(bi * 4 + j) * hw + s].as_f64();
            let bx = BoxAnnotation {
                x_min: (x - d(0)) as f32,
                y_min: (y - d(1)) as f32,
                x_max: (x + d(2)) as f32,
                y_max: (y + d(3)) as f32,
                class: c,
            };
            out.push((bx, score));
        }
    }
    out
}

/// `(recalled, total)` ground-truth boxes with a same-class prediction at IoU >= `iou`.
pub fn recall_counts(truth: &[BoxAnnotation], predicted: &[BoxAnnotation], iou: f32) -> (usize, usize) {
    let hit = truth.iter().filter(|t| predicted.iter().any(|p| p.class == t.class && p.iou(t) >= iou)).count();
    (hit, truth.len())
}

/// Hard dice over foreground classes of two label maps; 1 when both are empty.
pub fn mask_dice(pred: &[usize], target: &[usize]) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        if p > 0 && p == t {
            inter += 1;
        }
        total += usize::from(p > 0) + usize::from(t > 0);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Channel argmax of `[B, K, H, W]` logits for sample `bi`.
pub fn argmax_mask<R: Real>(logits: &Tensor<R>, bi: usize) -> Vec<usize> {
    let (_, k, h, w) = logits.dims4();
    let hw = h * w;
    (0..hw)
        .map(|s| {
            (0..k)
                .max_by(|&a, &b| {
                    let va = logits.data()[(bi * k + a) * hw + s];
                    let vb = logits.data()[(bi * k + b) * hw + s];
                    va.partial_cmp(&vb).unwrap_or(core::cmp::Ordering::Equal)
                })
                .unwrap_or(0)
        })
        .collect()
}
