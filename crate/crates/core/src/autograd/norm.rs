use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, Tape, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Normalization over the middle axis of an `(outer, n, inner)` view.
#[derive(Clone, Copy, Debug)]
struct Layout {
    outer: usize,
    n: usize,
    inner: usize,
}

impl Layout {
    #[inline]
    fn index(&self, o: usize, k: usize, s: usize) -> usize {
        (o * self.n + k) * self.inner + s
    }
}

struct NormOp<R: Real> {
    layout: Layout,
    xhat: Tensor<R>,
    inv_std: Vec<R>,
    affine: bool,
}

fn normalize<R: Real>(x: &Tensor<R>, l: Layout, eps: f64) -> (Tensor<R>, Vec<R>) {
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![R::zero(); l.outer * l.inner];
    let n = R::of(l.n as f64);
    let xd = x.data();
    for o in 0..l.outer {
        for s in 0..l.inner {
            let mut mean = R::zero();
            for k in 0..l.n {
                mean += xd[l.index(o, k, s)];
            }
            mean /= n;
            let mut var = R::zero();
            for k in 0..l.n {
                let d = xd[l.index(o, k, s)] - mean;
                var += d * d;
            }
            var /= n;
            let inv = R::one() / (var + R::of(eps)).sqrt();
            inv_std[o * l.inner + s] = inv;
            for k in 0..l.n {
                let i = l.index(o, k, s);
                xhat.data_mut()[i] = (xd[i] - mean) * inv;
            }
        }
    }
    (xhat, inv_std)
}

impl<R: Real> Backward<R> for NormOp<R> {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let l = self.layout;
        let gd = g.data();
        let xh = self.xhat.data();
        let gamma = self.affine.then(|| inputs[1].data());
        let n = R::of(l.n as f64);
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(inputs[0].shape());
            for o in 0..l.outer {
                for s in 0..l.inner {
                    let mut sum_d = R::zero();
                    let mut sum_dx = R::zero();
                    for k in 0..l.n {
                        let i = l.index(o, k, s);
                        let d = gd[i] * gamma.map_or(R::one(), |gm| gm[k]);
                        sum_d += d;
                        sum_dx += d * xh[i];
                    }
                    let inv = self.inv_std[o * l.inner + s];
                    for k in 0..l.n {
                        let i = l.index(o, k, s);
                        let d = gd[i] * gamma.map_or(R::one(), |gm| gm[k]);
                        dx.data_mut()[i] = inv / n * (n * d - sum_d - xh[i] * sum_dx);
                    }
                }
            }
            dx
        });
        let mut out = vec![dx];
        if self.affine {
            let mut dgamma = vec![R::zero(); l.n];
            let mut dbeta = vec![R::zero(); l.n];
            for o in 0..l.outer {
                for k in 0..l.n {
                    for s in 0..l.inner {
                        let i = l.index(o, k, s);
                        dgamma[k] += gd[i] * xh[i];
                        dbeta[k] += gd[i];
                    }
                }
            }
            out.push(needs[1].then(|| Tensor::from_vec(&[l.n], dgamma).unwrap()));
            out.push(needs[2].then(|| Tensor::from_vec(&[l.n], dbeta).unwrap()));
        }
        out
    }
}

impl<R: Real> Tape<R> {
    fn norm(&mut self, x: Var, layout: Layout, affine: Option<(Var, Var)>, eps: f64) -> Var {
        let (xhat, inv_std) = normalize(self.value(x), layout, eps);
        let mut y = xhat.clone();
        if let Some((gamma, beta)) = affine {
            let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
            assert_eq!(gm.len(), layout.n, "norm scale length mismatch");
            for o in 0..layout.outer {
                for k in 0..layout.n {
                    for s in 0..layout.inner {
                        let i = layout.index(o, k, s);
                        y.data_mut()[i] = y.data()[i] * gm[k] + bt[k];
                    }
                }
            }
        }
        let op = NormOp { layout, xhat, inv_std, affine: affine.is_some() };
        match affine {
            Some((g, b)) => self.push(y, &[x, g, b], op),
            None => self.push(y, &[x], op),
        }
    }

    /// Layer normalization over the last axis with a learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let n = *self.shape(x).last().expect("layer_norm on scalar");
        let outer = self.value(x).len() / n;
        self.norm(x, Layout { outer, n, inner: 1 }, Some((gamma, beta)), eps)
    }

    /// Layer normalization across channels at every spatial position of an NCHW map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        self.norm(x, Layout { outer: b, n: c, inner: h * w }, Some((gamma, beta)), eps)
    }

    /// Non-affine instance normalization: each (sample, channel) plane to zero mean, unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        self.norm(x, Layout { outer: b * c, n: h * w, inner: 1 }, None, eps)
    }
}
