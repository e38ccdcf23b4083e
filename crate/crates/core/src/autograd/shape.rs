use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, Tape, Var};
use crate::real::Real;
use crate::tensor::Tensor;

struct ReshapeOp;

impl<R: Real> Backward<R> for ReshapeOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(g.clone().reshaped(inputs[0].shape()))]
    }
}

pub(crate) fn permute_tensor<R: Real>(x: &Tensor<R>, axes: &[usize]) -> Tensor<R> {
    let shape = x.shape();
    let rank = shape.len();
    assert_eq!(axes.len(), rank, "permute axes {:?} for shape {:?}", axes, shape);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let src = x.data();
    if n > 0 {
        let last = rank - 1;
        let (inner_len, inner_stride) = (out_shape[last], strides[last]);
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        loop {
            for j in 0..inner_len {
                out.push(src[base + j * inner_stride]);
            }
            let mut d = last;
            loop {
                if d == 0 {
                    return Tensor::from_vec(&out_shape, out).expect("permute size");
                }
                d -= 1;
                idx[d] += 1;
                base += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                base -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::from_vec(&out_shape, out).expect("permute size")
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl<R: Real> Backward<R> for PermuteOp {
    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(permute_tensor(g, &self.inverse))]
    }
}

struct ConcatOp {
    batch: usize,
    splits: Vec<usize>,
    plane: usize,
}

impl<R: Real> Backward<R> for ConcatOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let total: usize = self.splits.iter().sum();
        let mut out = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for (i, &c) in self.splits.iter().enumerate() {
            out.push(needs[i].then(|| {
                let mut d = Vec::with_capacity(self.batch * c * self.plane);
                for b in 0..self.batch {
                    let start = (b * total + offset) * self.plane;
                    d.extend_from_slice(&g.data()[start..start + c * self.plane]);
                }
                Tensor::from_vec(inputs[i].shape(), d).unwrap()
            }));
            offset += c;
        }
        out
    }
}

struct UpsampleNearestOp {
    factor: usize,
}

impl<R: Real> Backward<R> for UpsampleNearestOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (b, c, h, w) = inputs[0].dims4();
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let mut dx = Tensor::zeros(inputs[0].shape());
        for p in 0..b * c {
            let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    dst[(y / f) * w + x / f] += src[y * ow + x];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Source taps for bilinear resampling with half-pixel centers.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn bilinear_taps(in_size: usize, out_size: usize) -> Vec<Tap> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(in_size - 1);
            let hi = (lo + 1).min(in_size - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

struct BilinearOp {
    ty: Vec<Tap>,
    tx: Vec<Tap>,
}

impl<R: Real> Backward<R> for BilinearOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (b, c, h, w) = inputs[0].dims4();
        let (oh, ow) = (self.ty.len(), self.tx.len());
        let mut dx = Tensor::zeros(inputs[0].shape());
        for p in 0..b * c {
            let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for (y, ty) in self.ty.iter().enumerate() {
                let fy = R::of(ty.frac);
                for (x, tx) in self.tx.iter().enumerate() {
                    let fx = R::of(tx.frac);
                    let gv = src[y * ow + x];
                    let top = gv * (R::one() - fy);
                    let bot = gv * fy;
                    dst[ty.lo * w + tx.lo] += top * (R::one() - fx);
                    dst[ty.lo * w + tx.hi] += top * fx;
                    dst[ty.hi * w + tx.lo] += bot * (R::one() - fx);
                    dst[ty.hi * w + tx.hi] += bot * fx;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct AvgPoolOp;

impl<R: Real> Backward<R> for AvgPoolOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (b, c, h, w) = inputs[0].dims4();
        let hw = h * w;
        let scale = R::one() / R::of(hw as f64);
        let mut dx = Tensor::zeros(inputs[0].shape());
        for p in 0..b * c {
            let v = g.data()[p] * scale;
            dx.data_mut()[p * hw..(p + 1) * hw].fill(v);
        }
        vec![Some(dx)]
    }
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl<R: Real> Backward<R> for MaxPoolOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (_, _, h, w) = inputs[0].dims4();
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (p, &i) in self.argmax.iter().enumerate() {
            dx.data_mut()[p * h * w + i] += g.data()[p];
        }
        vec![Some(dx)]
    }
}

/// Softmax over the middle axis of an `(outer, n, inner)` view.
struct SoftmaxOp {
    outer: usize,
    n: usize,
    inner: usize,
}

fn softmax_into<R: Real>(x: &[R], outer: usize, n: usize, inner: usize) -> Vec<R> {
    let mut y = vec![R::zero(); x.len()];
    for o in 0..outer {
        for s in 0..inner {
            let at = |k: usize| (o * n + k) * inner + s;
            let mut m = R::neg_infinity();
            for k in 0..n {
                m = m.max(x[at(k)]);
            }
            let mut z = R::zero();
            for k in 0..n {
                let e = (x[at(k)] - m).exp();
                y[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                y[at(k)] /= z;
            }
        }
    }
    y
}

impl<R: Real> Backward<R> for SoftmaxOp {
    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], y: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (gd, yd) = (g.data(), y.data());
        let mut dx = Tensor::zeros(y.shape());
        for o in 0..self.outer {
            for s in 0..self.inner {
                let at = |k: usize| (o * self.n + k) * self.inner + s;
                let mut dot = R::zero();
                for k in 0..self.n {
                    dot += gd[at(k)] * yd[at(k)];
                }
                for k in 0..self.n {
                    dx.data_mut()[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<R: Real> Tape<R> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshaped(shape);
        self.push(y, &[x], ReshapeOp)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let y = permute_tensor(self.value(x), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(y, &[x], PermuteOp { inverse })
    }

    /// Concatenates NCHW maps along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (b, _, h, w) = self.value(parts[0]).dims4();
        let splits: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pb, pc, ph, pw) = self.value(p).dims4();
                assert!(pb == b && ph == h && pw == w, "concat_channels: mismatched maps");
                pc
            })
            .collect();
        let total: usize = splits.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&splits) {
                let start = bi * c * plane;
                data.extend_from_slice(&self.value(p).data()[start..start + c * plane]);
            }
        }
        let y = Tensor::from_vec(&[b, total, h, w], data).unwrap();
        self.push(y, parts, ConcatOp { batch: b, splits, plane })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut y = Tensor::zeros(&[b, c, oh, ow]);
        for p in 0..b * c {
            let src = &self.value(x).data()[p * h * w..(p + 1) * h * w];
            let dst = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for yy in 0..oh {
                for xx in 0..ow {
                    dst[yy * ow + xx] = src[(yy / factor) * w + xx / factor];
                }
            }
        }
        self.push(y, &[x], UpsampleNearestOp { factor })
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let mut y = Tensor::zeros(&[b, c, out_h, out_w]);
        for p in 0..b * c {
            let src = &self.value(x).data()[p * h * w..(p + 1) * h * w];
            let dst = &mut y.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (yy, t) in ty.iter().enumerate() {
                let fy = R::of(t.frac);
                for (xx, s) in tx.iter().enumerate() {
                    let fx = R::of(s.frac);
                    let top = src[t.lo * w + s.lo] * (R::one() - fx) + src[t.lo * w + s.hi] * fx;
                    let bot = src[t.hi * w + s.lo] * (R::one() - fx) + src[t.hi * w + s.hi] * fx;
                    dst[yy * out_w + xx] = top * (R::one() - fy) + bot * fy;
                }
            }
        }
        self.push(y, &[x], BilinearOp { ty, tx })
    }

    /// Spatial mean: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let data: Vec<R> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<R>() / R::of(hw as f64))
            .collect();
        let y = Tensor::from_vec(&[b, c], data).unwrap();
        self.push(y, &[x], AvgPoolOp)
    }

    /// Spatial max: `[B, C, H, W] -> [B, C]`. Ties route the gradient to the first maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let mut argmax = Vec::with_capacity(b * c);
        let mut data = Vec::with_capacity(b * c);
        for p in self.value(x).data().chunks_exact(hw) {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            argmax.push(best);
            data.push(p[best]);
        }
        let y = Tensor::from_vec(&[b, c], data).unwrap();
        self.push(y, &[x], MaxPoolOp { argmax })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().expect("softmax on scalar");
        let outer = self.value(x).len() / n;
        let y = softmax_into(self.value(x).data(), outer, n, 1);
        let y = Tensor::from_vec(self.shape(x), y).unwrap();
        self.push(y, &[x], SoftmaxOp { outer, n, inner: 1 })
    }

    /// Softmax across channels of an NCHW map.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let y = softmax_into(self.value(x).data(), b, c, h * w);
        let y = Tensor::from_vec(self.shape(x), y).unwrap();
        self.push(y, &[x], SoftmaxOp { outer: b, n: c, inner: h * w })
    }
}

/// Channel softmax of a plain NCHW tensor, outside any tape.
pub fn softmax_channels_tensor<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (b, c, h, w) = x.dims4();
    Tensor::from_vec(x.shape(), softmax_into(x.data(), b, c, h * w)).unwrap()
}
