use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, Tape, Var};
use crate::real::Real;
use crate::tensor::Tensor;

struct AddOp;

impl<R: Real> Backward<R> for AddOp {
    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

struct MulOp;

impl<R: Real> Backward<R> for MulOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![
            needs[0].then(|| g.zip_map(inputs[1], |g, b| g * b)),
            needs[1].then(|| g.zip_map(inputs[0], |g, a| g * a)),
        ]
    }
}

struct ScaleOp<R>(R);

impl<R: Real> Backward<R> for ScaleOp<R> {
    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let s = self.0;
        vec![Some(g.map(|v| v * s))]
    }
}

struct MaskOp<R: Real>(Tensor<R>);

impl<R: Real> Backward<R> for MaskOp<R> {
    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(g.zip_map(&self.0, |g, m| g * m))]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    /// Tanh approximation.
    Gelu,
    Tanh,
    Sigmoid,
    Softplus,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
pub(crate) fn softplus<R: Real>(x: R) -> R {
    let zero = R::zero();
    (if x > zero { x } else { zero }) + (R::one() + (-x.abs()).exp()).ln()
}

impl Activation {
    fn apply<R: Real>(self, x: R) -> R {
        match self {
            Activation::Relu => {
                if x > R::zero() {
                    x
                } else {
                    R::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > R::zero() {
                    x
                } else {
                    x * R::of(s)
                }
            }
            Activation::Gelu => {
                let inner = R::of(GELU_C) * (x + R::of(GELU_A) * x * x * x);
                R::of(0.5) * x * (R::one() + inner.tanh())
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    fn derivative<R: Real>(self, x: R, y: R) -> R {
        match self {
            Activation::Relu => {
                if x > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > R::zero() {
                    R::one()
                } else {
                    R::of(s)
                }
            }
            Activation::Gelu => {
                let c = R::of(GELU_C);
                let a = R::of(GELU_A);
                let t = (c * (x + a * x * x * x)).tanh();
                let half = R::of(0.5);
                half * (R::one() + t)
                    + half * x * (R::one() - t * t) * c * (R::one() + R::of(3.0) * a * x * x)
            }
            Activation::Tanh => R::one() - y * y,
            Activation::Sigmoid => y * (R::one() - y),
            Activation::Softplus => sigmoid(x),
        }
    }
}

struct ActOp(Activation);

impl<R: Real> Backward<R> for ActOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], out: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let act = self.0;
        let data = g
            .data()
            .iter()
            .zip(inputs[0].data())
            .zip(out.data())
            .map(|((&g, &x), &y)| g * act.derivative(x, y))
            .collect();
        vec![Some(Tensor::from_vec(g.shape(), data).expect("shape preserved"))]
    }
}

struct SumOp;

impl<R: Real> Backward<R> for SumOp {
    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(Tensor::full(inputs[0].shape(), g.data()[0]))]
    }
}

impl<R: Real> Tape<R> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], AddOp)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (R::of(scale), R::of(shift));
        let out = self.value(a).map(|x| s * x + t);
        self.push(out, &[a], ScaleOp(s))
    }

    /// Elementwise product of two equally shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, &[a, b], MulOp)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = R::of(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], ScaleOp(s))
    }

    /// Multiplies by a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor<R>) -> Var {
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(out, &[a], MaskOp(mask))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let out = self.value(a).map(|x| act.apply(x));
        self.push(out, &[a], ActOp(act))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.activation(a, Activation::LeakyRelu(slope))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Softplus)
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), &[a], SumOp)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums a list of scalar nodes left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }
}
