//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value, the ids of its
//! inputs and (when any input needs a gradient) a backward rule. Nodes are
//! only ever appended, so the tape is in topological order by construction
//! and `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation.
pub trait BackwardOp<T: Scalar> {
    /// Gradients w.r.t. each input given the gradient w.r.t. the output.
    /// Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp<T>>>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
///
/// Confined to a single thread; run independent samples on independent tapes.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that gradients are accumulated for.
    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value: value.into(),
            inputs: Vec::new(),
            op: None,
            requires_grad,
        })
    }

    /// Append the result of an operation. The backward rule is dropped when
    /// no input requires a gradient.
    pub fn record(
        &self,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        op: impl BackwardOp<T> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
                nodes[v.id].requires_grad
            })
        };
        self.push(Node {
            value: Arc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: if requires_grad {
                Some(Box::new(op))
            } else {
                None
            },
            requires_grad,
        })
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Propagate d(loss)/d(·) to every `requires_grad` leaf reachable from
    /// `loss`, adding into previously accumulated gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.dims().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedGraph);
        }

        let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
        pending.resize_with(loss.id + 1, || None);
        pending[loss.id] = Some(Tensor::full(root.value.dims(), T::one()));

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.op {
                None => {
                    if node.requires_grad {
                        match &mut grads[id] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|&i| &*nodes[i].value).collect();
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let input_grads = op.backward(&inputs, &node.value, &g, &needs);
                    for ((&inp, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                        let Some(gi) = gi else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(gi.dims(), nodes[inp].value.dims());
                        match &mut pending[inp] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.dims().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Single element of a scalar value.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }
}
