//! Tape based reverse-mode differentiation.
//!
//! Every differentiable op evaluates eagerly and appends a node to the
//! [`Tape`] holding its value and a one-shot backward closure. [`Tape::backward`]
//! walks the nodes in reverse recording order, so each op's backward rule runs
//! exactly once, and then clears the tape.
//!
//! A tape is single-threaded (`Rc`/`RefCell` inside); independent tapes can be
//! used from different threads.

mod check;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use check::{grad_check, GradCheckOptions, GradCheckReport, ScalarFn};
pub use ops::{BatchNormMode, BatchStats};

use crate::real::Real;
use crate::tensor::{Tensor, TensorError, TensorResult};

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, Vec::new(), None)
    }

    /// Leaf that collects a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, true, Vec::new(), None)
    }

    /// Records a [`Variable`] as a leaf, honoring its `requires_grad` flag.
    pub fn variable(&self, v: &Variable<T>) -> Var<'_, T> {
        self.push(v.value.clone(), v.requires_grad, Vec::new(), None)
    }

    /// Records the result of an op. `backward` receives the output gradient and
    /// a per-parent "needs gradient" mask and returns one entry per parent.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push(value, true, ids, Some(Box::new(backward)))
        } else {
            self.push(value, false, ids, None)
        }
    }

    /// Back-propagates from a scalar `loss` and clears the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> TensorResult<Gradients<T>> {
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if nodes.is_empty() {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "tape is empty".into(),
            });
        }
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                expected: "scalar loss".into(),
                got: loss_shape,
            });
        }
        let is_leaf: Vec<bool> = nodes
            .iter()
            .map(|n| n.requires_grad && n.backward.is_none())
            .collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_shape));
        for id in (0..nodes.len()).rev() {
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parents = std::mem::take(&mut node.parents);
            let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for ((&p, pg), &need) in parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior values are no longer needed once their consumers ran.
            nodes[id].value = Rc::new(Tensor::zeros([0]));
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        for ((node, g), leaf) in nodes.iter().zip(grads).zip(is_leaf) {
            leaf_grads.push(if leaf {
                Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())))
            } else {
                None
            });
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the leaves of a finished tape.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Accumulates the gradient of leaf `id` into `var.grad`. Variables that do
    /// not require gradients are left untouched.
    pub fn accumulate_into(&self, id: usize, var: &mut Variable<T>) {
        if !var.requires_grad {
            return;
        }
        if let Some(g) = self.get_id(id) {
            var.grad.add_assign(g);
        }
    }
}

/// A trainable value together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Variable<T: Real = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

impl<T: Real> Variable<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn frozen(value: Tensor<T>) -> Self {
        Self {
            requires_grad: false,
            ..Self::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}
