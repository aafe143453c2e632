use super::ops::Op;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) op: Op,
    pub(super) requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub(super) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Propagates d`loss`/d(leaf) to every tracked leaf.
    ///
    /// The loss must hold a single element. A tape can be differentiated
    /// once; call [`Tape::reset`] before recording a new graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "loss variable {} does not belong to this tape",
                loss.0
            )));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let loss_node = &nodes[loss.0];

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaves = vec![None; nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            node.op.backward(nodes, &node.value, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked leaf; `None` for constants, interior nodes, or
    /// leaves the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when it received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
