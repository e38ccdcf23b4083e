use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, Tape, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// `y = x @ w^T + b` over the last axis of `x`.
struct LinearOp {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    has_bias: bool,
}

impl<R: Real> Backward<R> for LinearOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (rows, fi, fo) = (self.rows, self.fan_in, self.fan_out);
        let (x, w) = (inputs[0], inputs[1]);
        let mut out = Vec::with_capacity(inputs.len());
        out.push(needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            R::gemm(rows, fo, fi, R::one(), g.data(), (fo as isize, 1), w.data(), (fi as isize, 1), R::zero(), dx.data_mut(), (fi as isize, 1));
            dx
        }));
        out.push(needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            R::gemm(fo, rows, fi, R::one(), g.data(), (1, fo as isize), x.data(), (fi as isize, 1), R::zero(), dw.data_mut(), (fi as isize, 1));
            dw
        }));
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = vec![R::zero(); fo];
                for row in g.data().chunks_exact(fo) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Tensor::from_vec(&[fo], db).expect("bias shape")
            }));
        }
        out
    }
}

struct BmmOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
}

impl BmmOp {
    /// Row/column strides of the logical (untransposed) view of a stored matrix.
    fn view(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
        if transposed {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

impl<R: Real> Backward<R> for BmmOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0], inputs[1]);
        let a_view = Self::view(m, k, self.trans_a);
        let b_view = Self::view(k, n, self.trans_b);
        let g_view = (n as isize, 1);
        let mut da = needs[0].then(|| Tensor::zeros(a.shape()));
        let mut db = needs[1].then(|| Tensor::zeros(b.shape()));
        for bi in 0..self.batch {
            let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
            if let Some(da) = da.as_mut() {
                // dA = g @ B^T, written through A's logical view
                let bs = &b.data()[bi * k * n..(bi + 1) * k * n];
                let dst = &mut da.data_mut()[bi * m * k..(bi + 1) * m * k];
                R::gemm(m, n, k, R::one(), gs, g_view, bs, (b_view.1, b_view.0), R::zero(), dst, a_view);
            }
            if let Some(db) = db.as_mut() {
                // dB = A^T @ g
                let as_ = &a.data()[bi * m * k..(bi + 1) * m * k];
                let dst = &mut db.data_mut()[bi * k * n..(bi + 1) * k * n];
                R::gemm(k, m, n, R::one(), as_, (a_view.1, a_view.0), gs, g_view, R::zero(), dst, b_view);
            }
        }
        vec![da, db]
    }
}

impl<R: Real> Tape<R> {
    /// Affine map over the last axis: `x [.., in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be [out, in]");
        let (fo, fi) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("linear on scalar"), fi, "linear fan-in mismatch: {:?} vs {:?}", xs, ws);
        let rows = self.value(x).len() / fi;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = fo;
        let mut y = Tensor::zeros(&out_shape);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.data_mut().chunks_exact_mut(fo) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { R::one() } else { R::zero() };
        R::gemm(rows, fi, fo, R::one(), self.value(x).data(), (fi as isize, 1), self.value(w).data(), (1, fi as isize), beta, y.data_mut(), (fo as isize, 1));
        let op = LinearOp { rows, fan_in: fi, fan_out: fo, has_bias: b.is_some() };
        match b {
            Some(b) => self.push(y, &[x, w, b], op),
            None => self.push(y, &[x, w], op),
        }
    }

    /// Batched matrix product of rank-3 nodes, optionally transposing either operand.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {:?} {:?}", sa, sb);
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dimension mismatch {:?} {:?}", sa, sb);
        let batch = sa[0];
        let mut y = Tensor::zeros(&[batch, m, n]);
        let av = BmmOp::view(m, k, trans_a);
        let bv = BmmOp::view(k, n, trans_b);
        for bi in 0..batch {
            let as_ = &self.value(a).data()[bi * m * k..(bi + 1) * m * k];
            let bs = &self.value(b).data()[bi * k * n..(bi + 1) * k * n];
            let dst = &mut y.data_mut()[bi * m * n..(bi + 1) * m * n];
            R::gemm(m, k, n, R::one(), as_, av, bs, bv, R::zero(), dst, (n as isize, 1));
        }
        self.push(y, &[a, b], BmmOp { batch, m, k, n, trans_a, trans_b })
    }
}
