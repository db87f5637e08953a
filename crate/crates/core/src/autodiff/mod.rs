//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! which is already a topological order, so [`Tape::backward`] is a single
//! reverse sweep. Tapes are confined to the thread that builds them.

mod gradcheck;
pub mod kernels;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    log_softmax_last as log_softmax_tensor, softmax_last as softmax_tensor, CrossEntropyTarget,
    ScanOutput,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the incoming gradient, the op's output and
/// inputs, and which inputs actually need a gradient.
pub struct BackwardCtx<'a> {
    pub grad: &'a [f32],
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f32>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates ops but never records backward closures.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in backward iff the tensor's
    /// `requires_grad` flag is set and the tape is recording.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording && value.requires_grad();
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of a custom op. The closure is dropped when no
    /// parent requires a gradient.
    pub fn push_op(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let (parents, backward) = if requires_grad {
            (parents.iter().map(|p| p.0).collect(), Some(backward))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// True when an op over `parents` would need its backward closure.
    pub fn any_requires_grad(&self, parents: &[Var]) -> bool {
        self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_with_seed(loss, vec![1.0])
    }

    /// Backpropagates an arbitrary output gradient `seed` (same size as `out`).
    pub fn backward_with_seed(&self, out: Var, seed: Vec<f32>) -> Result<Gradients> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::shape("backward", self.shape(out), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves reached by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
