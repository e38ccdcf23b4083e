//! Parameter storage and the handful of layers the models are built from.

mod layers;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::real::Real;
use crate::rng::{normal, Rng};
use crate::tensor::Tensor;

pub use layers::{Conv2d, Linear, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of parameters created by one module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpan {
    pub start: usize,
    pub end: usize,
}

impl ParamSpan {
    pub fn ids(self) -> impl Iterator<Item = ParamId> {
        (self.start..self.end).map(ParamId)
    }

    pub fn contains(self, id: ParamId) -> bool {
        (self.start..self.end).contains(&id.0)
    }

    pub fn len(self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(self) -> bool {
        self.start == self.end
    }
}

/// Ownership of a parameter: the shared trunk or exactly one task head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Shared,
    Task(usize),
}

#[derive(Clone, Debug)]
pub struct Param<R: Real> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    pub group: Group,
    pub frozen: bool,
    /// Set when a gradient has been accumulated since the last `zero_grads`.
    pub touched: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real> {
    params: Vec<Param<R>>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// N(0, gain^2 / fan_in), fan_in = product of all but the leading axis.
    KaimingNormal { gain: f64 },
    /// N(0, std^2) resampled outside two standard deviations.
    TruncNormal { std: f64 },
}

impl Init {
    pub const RELU: Init = Init::KaimingNormal { gain: core::f64::consts::SQRT_2 };

    pub fn sample<R: Real>(self, shape: &[usize], rng: &mut Rng) -> Tensor<R> {
        let n: usize = shape.iter().product();
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let data = match self {
            Init::Zeros => alloc::vec![R::zero(); n],
            Init::Constant(v) => alloc::vec![R::of(v); n],
            Init::KaimingNormal { gain } => {
                let std = gain / libm::sqrt(fan_in as f64);
                (0..n).map(|_| R::of(normal(rng) * std)).collect()
            }
            Init::TruncNormal { std } => (0..n)
                .map(|_| loop {
                    let z = normal(rng);
                    if z.abs() <= 2.0 {
                        break R::of(z * std);
                    }
                })
                .collect(),
        };
        Tensor::from_vec(shape, data).expect("init shape")
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>, group: Group) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.into(), value, grad, group, frozen: false, touched: false });
        ParamId(self.params.len() - 1)
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, group: Group, rng: &mut Rng) -> ParamId {
        let value = init.sample(shape, rng);
        self.add(name, value, group)
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<R> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &Tensor<R>) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        p.grad.add_assign(g);
        p.touched = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(R::zero());
            p.touched = false;
        }
    }

    pub fn set_frozen(&mut self, pred: impl Fn(&Param<R>) -> bool, frozen: bool) {
        for p in &mut self.params {
            if pred(p) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_group(&mut self, group: Group) {
        self.set_frozen(|p| p.group == group, true);
    }

    /// Number of trainable (non-frozen) scalars.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    /// Span from parameter index `start` to the current end of the store.
    pub fn span_since(&self, start: usize) -> ParamSpan {
        ParamSpan { start, end: self.params.len() }
    }

    /// Trainable scalars inside `span`.
    pub fn count_span(&self, span: ParamSpan) -> usize {
        self.params[span.start..span.end].iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn set_span_frozen(&mut self, span: ParamSpan, frozen: bool) {
        for p in &mut self.params[span.start..span.end] {
            p.frozen = frozen;
        }
    }

    pub fn count_where(&self, pred: impl Fn(&Param<R>) -> bool) -> usize {
        self.params.iter().filter(|p| !p.frozen && pred(p)).map(|p| p.value.len()).sum()
    }

    /// Order-sensitive FNV-1a digest over names, shapes, and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Same parameters in another precision.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Tensor::cast(&p.value),
                    grad: Tensor::cast(&p.grad),
                    group: p.group,
                    frozen: p.frozen,
                    touched: p.touched,
                })
                .collect(),
        }
    }

    /// Replaces values from `(name, tensor)` pairs; every stored parameter must be covered.
    pub fn load_values(&mut self, values: &[(String, Tensor<R>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(invalid!("expected {} parameters, found {}", self.params.len(), values.len()));
        }
        for (p, (name, v)) in self.params.iter_mut().zip(values) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(invalid!(
                    "parameter mismatch: model has {} {:?}, source has {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    v.shape()
                ));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Forward-pass context: the tape being recorded, the parameters it reads, and the
/// randomness used by stochastic layers in training mode.
pub struct Ctx<'a, R: Real> {
    pub tape: Tape<R>,
    pub store: &'a ParamStore<R>,
    training: bool,
    rng: Option<&'a mut Rng>,
}

impl<'a, R: Real> Ctx<'a, R> {
    pub fn inference(store: &'a ParamStore<R>) -> Self {
        Self { tape: Tape::new(), store, training: false, rng: None }
    }

    pub fn training(store: &'a ParamStore<R>, rng: &'a mut Rng) -> Self {
        Self { tape: Tape::new(), store, training: true, rng: Some(rng) }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape<R>, store: &'a ParamStore<R>) -> Self {
        Self { tape, store, training: false, rng: None }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.tape.constant(t)
    }

    fn rng(&mut self) -> &mut Rng {
        self.rng.as_deref_mut().expect("training context carries an rng")
    }

    /// Inverted dropout on individual elements.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p == 0.0 {
            return x;
        }
        let n = self.tape.value(x).len();
        let keep = R::of(1.0 / (1.0 - p));
        let rng = self.rng();
        let mask: Vec<R> = (0..n).map(|_| if rand::Rng::random::<f64>(rng) < p { R::zero() } else { keep }).collect();
        let mask = Tensor::from_vec(self.tape.shape(x), mask).unwrap();
        self.tape.mul_const(x, mask)
    }

    /// Inverted dropout of whole channels of an NCHW map.
    pub fn spatial_dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p == 0.0 {
            return x;
        }
        let (b, c, h, w) = self.tape.value(x).dims4();
        let keep = R::of(1.0 / (1.0 - p));
        let rng = self.rng();
        let mut mask = Vec::with_capacity(b * c * h * w);
        for _ in 0..b * c {
            let v = if rand::Rng::random::<f64>(rng) < p { R::zero() } else { keep };
            mask.extend(core::iter::repeat_n(v, h * w));
        }
        let mask = Tensor::from_vec(&[b, c, h, w], mask).unwrap();
        self.tape.mul_const(x, mask)
    }
}
