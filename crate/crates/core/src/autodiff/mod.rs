//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert tape: every operation on a [`Var`] appends a node
//! holding its forward value and a closure that maps the output gradient to
//! gradients for its inputs. [`Graph::backward`] walks the tape once in
//! reverse order; gradients from fan-out are summed.
//!
//! The tape is single-owner (`!Sync`); kernels inside individual operations
//! may use worker threads but always reduce in a fixed order, so results do
//! not depend on the thread count.

mod conv;
mod norm;
mod ops;
mod pool;
mod resample;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{conv1d, conv3d, conv3d_padded, same_padding};
pub use norm::{batchnorm, BatchNormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::Activation;
pub use pool::maxpool;
pub use resample::{resize_axis_linear, resize_trilinear, upsample_to_corners, upsample_trilinear};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    is_leaf: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Operation tape. Create one per forward/backward cycle.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, is_leaf: true, parents: Vec::new(), backward: None });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Appends an operation node. The forward value must be finite.
    pub(crate) fn record<'g, F>(
        &'g self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'g>],
        backward: F,
    ) -> Result<Var<'g>>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            is_leaf: false,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Ok(Var { graph: self, id: nodes.len() - 1 })
    }

    /// Runs reverse accumulation from a scalar `loss`.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::DetachedLoss);
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut out = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.is_leaf {
                if node.requires_grad {
                    out.insert(id, g);
                }
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { by_id: out })
    }
}

/// Gradients of the loss with respect to every `param` leaf that it reaches.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    /// `None` means the loss does not depend on `var`.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    /// Gradient of `var`, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }
}


#[cfg(test)]
pub(crate) mod gradcheck;
