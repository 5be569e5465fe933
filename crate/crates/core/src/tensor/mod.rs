//! Minimal reverse-mode autodiff over `ndarray` dynamic-dimension arrays.
//!
//! A [`Tape`] records the forward computation as a flat arena of nodes; each
//! non-leaf node keeps a boxed [`VjpOp`] that maps the output cotangent back
//! to cotangents of its parents. Everything is generic over [`Scalar`] so the
//! same network code can run in `f32` for training and `f64` for
//! finite-difference verification.

mod conv;
mod ops;

pub use conv::{col2im, im2col};

use ndarray::{ArrayD, IxDyn};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of all tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Convert an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self {
        FromPrimitive::from_f64(x).expect("finite literal")
    }
    fn to_f64v(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
pub trait VjpOp<S: Scalar> {
    /// Given the cotangent of the output, the parent values and the output
    /// value, return one cotangent per parent (same order as `parents`).
    fn vjp(&self, grad: &ArrayD<S>, inputs: &[&ArrayD<S>], output: &ArrayD<S>) -> Vec<ArrayD<S>>;
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    parents: Vec<usize>,
    op: Option<Box<dyn VjpOp<S>>>,
    needs_grad: bool,
}

/// Forward-pass recording arena.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Non-differentiable input; gradients stop here.
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn scalar(&mut self, x: S) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<S>,
        parents: Vec<usize>,
        op: Option<Box<dyn VjpOp<S>>>,
        needs_grad: bool,
    ) -> Var {
        let needs = needs_grad || parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record(&mut self, value: ArrayD<S>, parents: &[Var], op: Box<dyn VjpOp<S>>) -> Var {
        self.push(value, parents.iter().map(|v| v.0).collect(), Some(op), false)
    }

    /// Reverse sweep from `root` (which must be a scalar-valued node).
    /// Returns a gradient table indexed by `Var`.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            S::one(),
        ));
        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                if let Some(op) = &node.op {
                    let inputs: Vec<&ArrayD<S>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let parent_grads = op.vjp(&grad, &inputs, &node.value);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, g) in node.parents.iter().zip(parent_grads) {
                        if !self.nodes[p].needs_grad {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => acc.zip_mut_with(&g, |a, &b| *a = *a + b),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests;
