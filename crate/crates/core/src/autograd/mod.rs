//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. Calling
//! [`Tape::backward`] walks the nodes in reverse order. Parameters enter the tape as
//! copies of their [`ParamStore`] values and their gradients are folded back into the
//! store with [`ParamStore::accumulate`].

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod loss;
mod norm;
mod shape;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub use elementwise::Activation;
pub use loss::{smoothed_cross_entropy_rows, DiceFocalConfig};
pub use shape::softmax_channels_tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) trait Backward<R: Real> {
    /// Returns one gradient per input; entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        grad: &Tensor<R>,
        inputs: &[&Tensor<R>],
        output: &Tensor<R>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<R>>>;
}

struct Node<R: Real> {
    value: Tensor<R>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<R>>>,
    requires_grad: bool,
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    params: BTreeMap<ParamId, Var>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is recorded when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Brings a parameter onto the tape. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            inputs: Vec::new(),
            op: None,
            requires_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> R {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "item() on non-scalar of shape {:?}", t.shape());
        t.data()[0]
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<R>,
        inputs: &[Var],
        op: impl Backward<R> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(output)/d(node) for every node that requires a gradient.
    ///
    /// `output` must hold a single element.
    pub fn backward(&self, output: Var) -> Gradients<R> {
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        let out = &self.nodes[output.0];
        assert_eq!(out.value.len(), 1, "backward() needs a scalar output");
        if out.requires_grad {
            grads[output.0] = Some(Tensor::full(out.value.shape(), R::one()));
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<R>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> =
                node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = op.backward(&g, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&j, ig), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(ig) = ig else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[j].value.shape());
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Gradients { grads }
    }

    /// Parameter leaves on this tape and their nodes.
    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }
}

pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a leaf. Interior nodes are released during the sweep.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<R: Real> ParamStore<R> {
    /// Adds the parameter gradients of one backward pass into the store.
    pub fn accumulate(&mut self, tape: &Tape<R>, grads: &Gradients<R>) {
        for (id, v) in tape.param_nodes() {
            if let Some(g) = grads.wrt(v) {
                self.add_grad(id, g);
            }
        }
    }
}
