//! Reverse-mode gradient tape.
//!
//! Every differentiable operation records its output value, its parent
//! nodes, and a closure producing the vector-Jacobian product for each
//! parent. Backward walks the tape once in reverse insertion order, which is
//! a valid topological order because nodes can only reference earlier ones.

use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// This node's forward value.
    pub out: &'a Tensor<T>,
    /// Forward values of the parents, in registration order.
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each parent needs a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<usize>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.insert_leaf(value, true, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.insert_leaf(value, false, None)
    }

    /// Leaf bound to entry `id` of a parameter store.
    pub fn param_leaf(&mut self, value: Tensor<T>, id: usize, trainable: bool) -> Var {
        self.insert_leaf(value, trainable, Some(id))
    }

    fn insert_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The backward closure is dropped when no parent
    /// requires a gradient.
    pub fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss` seeded with gradient one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let seed = Tensor::full(self.value(loss).shape().to_vec(), T::one());
        self.backward_with(loss, seed)
    }

    /// Back-propagates an arbitrary output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        Gradients { grads, params }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(param id, gradient)` for every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }

    pub fn into_params(mut self) -> Vec<(usize, Tensor<T>)> {
        let mut out = Vec::new();
        for &(id, node) in &self.params {
            if let Some(g) = self.grads[node].take() {
                out.push((id, g));
            }
        }
        out
    }
}
