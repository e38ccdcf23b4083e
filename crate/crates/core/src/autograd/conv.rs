use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, Tape, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Output columns `[lo, hi)` whose input column `ox * stride + offset` lies inside `0..width`.
#[inline]
fn valid_span(offset: isize, stride: usize, width: usize, out_w: usize) -> (usize, usize) {
    let lo = if offset < 0 { ((-offset) as usize).div_ceil(stride) } else { 0 };
    let room = width as isize - offset;
    let hi = if room <= 0 { 0 } else { (room as usize).div_ceil(stride).min(out_w) };
    (lo.min(hi), hi)
}

fn im2col<R: Real>(x: &[R], g: &Geometry, col: &mut [R]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let off = kj as isize - g.pad as isize;
                let (lo, hi) = valid_span(off, g.stride, g.width, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(R::zero());
                    line[hi..].fill(R::zero());
                    if g.stride == 1 {
                        let s0 = (lo as isize + off) as usize;
                        line[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    } else {
                        for (ox, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[((ox + lo) * g.stride) .wrapping_add_signed(off)];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<R: Real>(col: &[R], g: &Geometry, dx: &mut [R]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let off = kj as isize - g.pad as isize;
                let (lo, hi) = valid_span(off, g.stride, g.width, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        let d0 = (lo as isize + off) as usize;
                        for (d, &v) in line[d0..d0 + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in s.iter().enumerate() {
                            line[((i + lo) * g.stride).wrapping_add_signed(off)] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

struct Conv2dOp {
    geo: Geometry,
    batch: usize,
    out_channels: usize,
    has_bias: bool,
}

impl<R: Real> Backward<R> for Conv2dOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let geo = &self.geo;
        let (x, w) = (inputs[0], inputs[1]);
        let (rows, cols, oc) = (geo.col_rows(), geo.col_cols(), self.out_channels);
        let in_plane = geo.channels * geo.height * geo.width;
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![R::zero(); rows * cols] };
        let mut dcol = if geo.is_pointwise() || dx.is_none() { Vec::new() } else { vec![R::zero(); rows * cols] };
        for b in 0..self.batch {
            let gs = &g.data()[b * oc * cols..(b + 1) * oc * cols];
            let xs = &x.data()[b * in_plane..(b + 1) * in_plane];
            if let Some(dw) = dw.as_mut() {
                let cols_view: &[R] = if geo.is_pointwise() {
                    xs
                } else {
                    im2col(xs, geo, &mut col);
                    &col
                };
                // dW[oc, rows] += g[oc, cols] @ col^T
                R::gemm(oc, cols, rows, R::one(), gs, (cols as isize, 1), cols_view, (1, cols as isize), R::one(), dw.data_mut(), (rows as isize, 1));
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[b * in_plane..(b + 1) * in_plane];
                if geo.is_pointwise() {
                    R::gemm(rows, oc, cols, R::one(), w.data(), (1, rows as isize), gs, (cols as isize, 1), R::zero(), dst, (cols as isize, 1));
                } else {
                    R::gemm(rows, oc, cols, R::one(), w.data(), (1, rows as isize), gs, (cols as isize, 1), R::zero(), &mut dcol, (cols as isize, 1));
                    col2im(&dcol, geo, dst);
                }
            }
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = vec![R::zero(); oc];
                for b in 0..self.batch {
                    for (o, d) in db.iter_mut().enumerate() {
                        let start = (b * oc + o) * cols;
                        *d += g.data()[start..start + cols].iter().copied().sum::<R>();
                    }
                }
                Tensor::from_vec(&[oc], db).expect("bias shape")
            }));
        }
        out
    }
}

impl<R: Real> Tape<R> {
    /// 2-D cross-correlation. `x [B, C, H, W]`, `w [O, C, kh, kw]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (batch, channels, height, width) = self.value(x).dims4();
        let (oc, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(channels, wc, "conv2d channel mismatch: input {channels}, weight {wc}");
        assert!(height + 2 * pad >= kh && width + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let geo = Geometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: conv_out_size(height, kh, stride, pad),
            out_w: conv_out_size(width, kw, stride, pad),
        };
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let mut y = Tensor::zeros(&[batch, oc, geo.out_h, geo.out_w]);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for plane in y.data_mut().chunks_exact_mut(cols).enumerate() {
                let (i, p) = plane;
                p.fill(bias[i % oc]);
            }
        }
        let beta = if b.is_some() { R::one() } else { R::zero() };
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![R::zero(); rows * cols] };
        let in_plane = channels * height * width;
        for bi in 0..batch {
            let xs = &self.value(x).data()[bi * in_plane..(bi + 1) * in_plane];
            let src: &[R] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut col);
                &col
            };
            let dst = &mut y.data_mut()[bi * oc * cols..(bi + 1) * oc * cols];
            R::gemm(oc, rows, cols, R::one(), self.value(w).data(), (rows as isize, 1), src, (cols as isize, 1), beta, dst, (cols as isize, 1));
        }
        let op = Conv2dOp { geo, batch, out_channels: oc, has_bias: b.is_some() };
        match b {
            Some(b) => self.push(y, &[x, w, b], op),
            None => self.push(y, &[x, w], op),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_gradients, GradCheckOptions};

    fn ramp(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 * 1.3 + seed) * 0.37).sin()).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (bn, c, h, wd) = x.dims4();
        let (o, _, kh, kw) = w.dims4();
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(wd, kw, stride, pad);
        let mut y = Tensor::zeros(&[bn, o, oh, ow]);
        for n in 0..bn {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[oc];
                        for ci in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let yy = (i * stride + a) as isize - pad as isize;
                                    let xx = (j * stride + bb) as isize - pad as isize;
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                        acc += x.data()[((n * c + ci) * h + yy as usize) * wd + xx as usize]
                                            * w.data()[((oc * c + ci) * kh + a) * kw + bb];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((n * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loop() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 4, 0), (2, 2, 0)] {
            let x = ramp(&[2, 3, 8, 8], 0.1);
            let w = ramp(&[4, 3, k, k], 0.9);
            let b = [0.1, -0.2, 0.3, 0.0];
            let mut tape = Tape::<f64>::new();
            let vx = tape.constant(x.clone());
            let vw = tape.constant(w.clone());
            let vb = tape.constant(Tensor::from_vec(&[4], b.to_vec()).unwrap());
            let y = tape.conv2d(vx, vw, Some(vb), s, p);
            let reference = naive_conv(&x, &w, &b, s, p);
            assert!(tape.value(y).max_abs_diff(&reference) < 1e-12, "k{k} s{s} p{p}");
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let inputs = [ramp(&[2, 2, 6, 6], 0.2), ramp(&[3, 2, k, k], 0.4), ramp(&[3], 0.8)];
            let r = check_gradients(
                &inputs,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), s, p);
                    let y = t.tanh(y);
                    t.sum(y)
                },
                GradCheckOptions::default(),
            );
            assert!(r.max_rel_err < 1e-6, "k{k} s{s} p{p}: {r:?}");
        }
    }
}
