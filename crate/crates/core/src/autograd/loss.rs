//! Fused loss nodes with hand-derived gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::elementwise::{sigmoid, softplus};
use super::{Backward, Tape, Var};
use crate::real::Real;
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;

struct CrossEntropyOp<R: Real> {
    /// softmax(logits) - smoothed target, already divided by the batch size.
    grad: Tensor<R>,
}

impl<R: Real> Backward<R> for CrossEntropyOp<R> {
    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let s = g.data()[0];
        vec![Some(self.grad.map(|v| v * s))]
    }
}

/// Per-sample cross-entropy of logits against `(1 - eps) * onehot + eps / K`.
pub fn smoothed_cross_entropy_rows<R: Real>(logits: &Tensor<R>, labels: &[usize], eps: f64) -> (Vec<R>, Tensor<R>) {
    let k = logits.shape()[1];
    let off = R::of(eps / k as f64);
    let on = R::of(1.0 - eps) + off;
    let mut losses = Vec::with_capacity(labels.len());
    let mut probs = Tensor::zeros(logits.shape());
    for (i, (row, &y)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        let m = row.iter().copied().fold(R::neg_infinity(), R::max);
        let z: R = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        let mut loss = R::zero();
        for (j, &v) in row.iter().enumerate() {
            let q = if j == y { on } else { off };
            loss -= q * (v - log_z);
            probs.data_mut()[i * k + j] = (v - log_z).exp();
        }
        losses.push(loss);
    }
    (losses, probs)
}

/// Dice and focal hyper-parameters for the dense segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceFocalConfig {
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for DiceFocalConfig {
    fn default() -> Self {
        Self { dice_weight: 1.0, focal_weight: 1.0, alpha: 0.25, gamma: 2.0 }
    }
}

/// Dice over foreground classes present in the target, pooled over the whole batch,
/// and the pixel-mean focal term. Returns `(dice_loss, focal_loss, d dice/dp, d focal/dp)`.
pub(crate) fn dice_focal_terms<R: Real>(
    probs: &Tensor<R>,
    target: &[usize],
    cfg: &DiceFocalConfig,
    want_grad: bool,
) -> (R, R, Option<(Tensor<R>, Tensor<R>)>) {
    let (b, k, h, w) = probs.dims4();
    let hw = h * w;
    let n_pix = b * hw;
    let p = probs.data();
    let at = |bi: usize, c: usize, s: usize| (bi * k + c) * hw + s;

    let mut inter = vec![R::zero(); k];
    let mut pred = vec![R::zero(); k];
    let mut truth = vec![0usize; k];
    for bi in 0..b {
        for s in 0..hw {
            let t = target[bi * hw + s];
            truth[t] += 1;
            inter[t] += p[at(bi, t, s)];
            for (c, acc) in pred.iter_mut().enumerate() {
                *acc += p[at(bi, c, s)];
            }
        }
    }
    let present: Vec<usize> = (1..k).filter(|&c| truth[c] > 0).collect();
    let two = R::of(2.0);
    let mut dice = R::zero();
    if !present.is_empty() {
        let mut coef = R::zero();
        for &c in &present {
            coef += two * inter[c] / (pred[c] + R::of(truth[c] as f64));
        }
        dice = R::one() - coef / R::of(present.len() as f64);
    }

    let alpha = R::of(cfg.alpha);
    let gamma = R::of(cfg.gamma);
    let floor = R::of(PROB_FLOOR);
    let mut focal = R::zero();
    for bi in 0..b {
        for s in 0..hw {
            let t = target[bi * hw + s];
            let pt = p[at(bi, t, s)].max(floor);
            focal -= alpha * (R::one() - pt).powf(gamma) * pt.ln();
        }
    }
    focal /= R::of(n_pix as f64);

    let grads = want_grad.then(|| {
        let mut d_dice = Tensor::zeros(probs.shape());
        if !present.is_empty() {
            let scale = R::one() / R::of(present.len() as f64);
            for &c in &present {
                let denom = pred[c] + R::of(truth[c] as f64);
                let d2 = denom * denom;
                for bi in 0..b {
                    for s in 0..hw {
                        let g = if target[bi * hw + s] == c { R::one() } else { R::zero() };
                        d_dice.data_mut()[at(bi, c, s)] = -scale * (two * g * denom - two * inter[c]) / d2;
                    }
                }
            }
        }
        let mut d_focal = Tensor::zeros(probs.shape());
        let inv_n = R::one() / R::of(n_pix as f64);
        for bi in 0..b {
            for s in 0..hw {
                let t = target[bi * hw + s];
                let raw = p[at(bi, t, s)];
                if raw <= floor {
                    continue;
                }
                let q = R::one() - raw;
                let d = if cfg.gamma == 0.0 {
                    -R::one() / raw
                } else {
                    gamma * q.powf(gamma - R::one()) * raw.ln() - q.powf(gamma) / raw
                };
                d_focal.data_mut()[at(bi, t, s)] = alpha * d * inv_n;
            }
        }
        (d_dice, d_focal)
    });
    (dice, focal, grads)
}

struct DiceFocalOp<R: Real> {
    grad: Tensor<R>,
}

impl<R: Real> Backward<R> for DiceFocalOp<R> {
    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let s = g.data()[0];
        vec![Some(self.grad.map(|v| v * s))]
    }
}

struct ElementLossOp<R: Real> {
    grad: Tensor<R>,
    inputs: usize,
}

impl<R: Real> Backward<R> for ElementLossOp<R> {
    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let s = g.data()[0];
        let mut out = vec![Some(self.grad.map(|v| v * s))];
        out.resize_with(self.inputs, || None);
        out
    }
}

/// Numerically stable sigmoid focal loss of one logit against a binary target.
/// Returns `(loss, d loss / d logit)`.
pub(crate) fn sigmoid_focal_term<R: Real>(x: R, target: bool, alpha: f64, gamma: f64) -> (R, R) {
    let z = if target { x } else { -x };
    let a = R::of(if target { alpha } else { 1.0 - alpha });
    let gamma_r = R::of(gamma);
    let pt = sigmoid(z);
    let log_pt = -softplus(-z);
    let q = R::one() - pt;
    let qg = if gamma == 0.0 { R::one() } else { q.powf(gamma_r) };
    let loss = -a * qg * log_pt;
    // dL/dz = a * (gamma * q^gamma * pt * ln pt - q^(gamma + 1))
    let dz = a * (gamma_r * qg * pt * log_pt - qg * q);
    (loss, if target { dz } else { -dz })
}

/// Intersection, union, and the grad of (I, pred area) w.r.t. each predicted side.
fn ltrb_overlap<R: Real>(p: [R; 4], t: [R; 4]) -> (R, R, [(R, R); 4]) {
    let wi = p[0].min(t[0]) + p[2].min(t[2]);
    let hi = p[1].min(t[1]) + p[3].min(t[3]);
    let inter = wi * hi;
    let ap = (p[0] + p[2]) * (p[1] + p[3]);
    let at = (t[0] + t[2]) * (t[1] + t[3]);
    let union = ap + at - inter;
    let sel = |a: R, b: R| if a <= b { R::one() } else { R::zero() };
    let d = [
        (sel(p[0], t[0]) * hi, p[1] + p[3]),
        (sel(p[1], t[1]) * wi, p[0] + p[2]),
        (sel(p[2], t[2]) * hi, p[1] + p[3]),
        (sel(p[3], t[3]) * wi, p[0] + p[2]),
    ];
    (inter, union, d)
}

impl<R: Real> Tape<R> {
    /// Mean cross-entropy of `[B, K]` logits against integer labels with label smoothing `eps`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], eps: f64) -> Var {
        let lv = self.value(logits);
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(lv.rank(), 2, "cross_entropy expects [B, K] logits");
        assert_eq!(labels.len(), b, "one label per row");
        assert!(labels.iter().all(|&y| y < k), "label out of range");
        let (losses, probs) = smoothed_cross_entropy_rows(lv, labels, eps);
        let inv_b = R::one() / R::of(b as f64);
        let mean = losses.iter().copied().sum::<R>() * inv_b;
        let off = R::of(eps / k as f64);
        let on = R::of(1.0 - eps) + off;
        let mut grad = probs;
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..k {
                let q = if j == y { on } else { off };
                let v = &mut grad.data_mut()[i * k + j];
                *v = (*v - q) * inv_b;
            }
        }
        self.push(Tensor::scalar(mean), &[logits], CrossEntropyOp { grad })
    }

    /// Weighted dice + focal loss of class probabilities `[B, K, H, W]` against a label map.
    pub fn dice_focal(&mut self, probs: Var, target: &[usize], cfg: &DiceFocalConfig) -> Var {
        let pv = self.value(probs);
        let (b, k, h, w) = pv.dims4();
        assert_eq!(target.len(), b * h * w, "target must hold one label per pixel");
        assert!(target.iter().all(|&t| t < k), "target label out of range");
        let (dice, focal, grads) = dice_focal_terms(pv, target, cfg, self.requires_grad(probs));
        let (dw, fw) = (R::of(cfg.dice_weight), R::of(cfg.focal_weight));
        let value = dw * dice + fw * focal;
        let grad = match grads {
            Some((dd, df)) => dd.zip_map(&df, |a, b| dw * a + fw * b),
            None => Tensor::zeros(pv.shape()),
        };
        self.push(Tensor::scalar(value), &[probs], DiceFocalOp { grad })
    }

    /// Summed sigmoid focal loss; `targets` holds 0/1 per logit.
    pub fn sigmoid_focal_sum(&mut self, logits: Var, targets: &[bool], alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        let mut total = R::zero();
        let mut grad = Tensor::zeros(lv.shape());
        for (i, (&x, &t)) in lv.data().iter().zip(targets).enumerate() {
            let (l, d) = sigmoid_focal_term(x, t, alpha, gamma);
            total += l;
            grad.data_mut()[i] = d;
        }
        self.push(Tensor::scalar(total), &[logits], ElementLossOp { grad, inputs: 1 })
    }

    /// Summed binary cross-entropy with logits over entries where `mask` is set.
    pub fn bce_logits_sum(&mut self, logits: Var, targets: &[R], mask: &[bool]) -> Var {
        let lv = self.value(logits);
        assert!(lv.len() == targets.len() && lv.len() == mask.len());
        let mut total = R::zero();
        let mut grad = Tensor::zeros(lv.shape());
        for (i, ((&x, &t), &m)) in lv.data().iter().zip(targets).zip(mask).enumerate() {
            if !m {
                continue;
            }
            total += softplus(x) - t * x;
            grad.data_mut()[i] = sigmoid(x) - t;
        }
        self.push(Tensor::scalar(total), &[logits], ElementLossOp { grad, inputs: 1 })
    }

    /// Summed `-ln IoU` between predicted and target `(l, t, r, b)` maps `[B, 4, H, W]`
    /// over locations where `mask` (length `B*H*W`) is set.
    pub fn iou_loss_sum(&mut self, pred: Var, target: &Tensor<R>, mask: &[bool]) -> Var {
        let pv = self.value(pred);
        let (b, four, h, w) = pv.dims4();
        assert_eq!(four, 4);
        assert_eq!(target.shape(), pv.shape());
        assert_eq!(mask.len(), b * h * w);
        let hw = h * w;
        let mut total = R::zero();
        let mut grad = Tensor::zeros(pv.shape());
        for bi in 0..b {
            for s in 0..hw {
                if !mask[bi * hw + s] {
                    continue;
                }
                let idx = |c: usize| (bi * 4 + c) * hw + s;
                let p = [0, 1, 2, 3].map(|c| pv.data()[idx(c)]);
                let t = [0, 1, 2, 3].map(|c| target.data()[idx(c)]);
                let (inter, union, d) = ltrb_overlap(p, t);
                total += (union + R::one()).ln() - (inter + R::one()).ln();
                // L = ln(U + 1) - ln(I + 1), U = Ap + At - I
                let d_inter = -R::one() / (inter + R::one()) - R::one() / (union + R::one());
                let d_area = R::one() / (union + R::one());
                for (c, (di, da)) in d.iter().enumerate() {
                    grad.data_mut()[idx(c)] = d_inter * *di + d_area * *da;
                }
            }
        }
        self.push(Tensor::scalar(total), &[pred], ElementLossOp { grad, inputs: 1 })
    }
}
