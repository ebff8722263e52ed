//! Append-only computation tape with reverse-mode differentiation.

use super::ops::{self, OpKind};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

enum NodeKind {
    /// Leaf that never receives a gradient tensor of its own unless reached.
    Input,
    /// Trainable leaf; always present in [`Gradients`], as zeros when the
    /// loss does not reach it.
    Parameter,
    Op { op: OpKind, inputs: Vec<NodeId> },
}

struct Node {
    kind: NodeKind,
    value: Tensor,
}

/// Single-writer computation graph. Nodes are appended in evaluation order,
/// every operation's inputs precede it, and forward values are cached at
/// insertion, so the structure is acyclic by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a non-trainable leaf (data fed into the graph).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Input, value)
    }

    /// Inserts a trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Parameter, value)
    }

    fn push(&mut self, kind: NodeKind, value: Tensor) -> NodeId {
        self.nodes.push(Node { kind, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Applies `op` to existing nodes, evaluating eagerly and recording the
    /// step for the backward pass.
    pub fn apply(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::shape(
                    "graph",
                    format!("node id {} does not exist in this graph", id.0),
                ));
            }
        }
        let refs: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = ops::eval(&op, &refs)?;
        Ok(self.push(
            NodeKind::Op {
                op,
                inputs: inputs.to_vec(),
            },
            value,
        ))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Reverse-mode sweep from a scalar loss node.
    ///
    /// Nodes are processed in descending id order (reverse insertion order),
    /// and gradient contributions accumulate in that fixed order, so repeated
    /// runs are bit-identical. Every `Parameter` leaf appears in the result,
    /// as a zero tensor when the loss does not reach it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::shape(
                "graph",
                format!("loss node id {} does not exist", loss.0),
            ));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must hold one element, got shape {:?}", loss_value.shape()),
            ));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let NodeKind::Op { op, inputs } = &self.nodes[id].kind else {
                continue;
            };
            // Inputs always precede the node, so splitting at `id` lets the
            // node's own gradient be read while the inputs' accumulate.
            let (lower, upper) = grads.split_at_mut(id);
            let Some(grad) = upper[0].as_ref() else {
                continue;
            };
            let refs: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = ops::backward_op(op, &refs, &self.nodes[id].value, grad)?;
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (input_id, g) in inputs.iter().zip(input_grads.into_iter()) {
                match &mut lower[input_id.0] {
                    Some(existing) => existing.add_in_place(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Parameter) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }

        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward sweep, addressed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node, if the node is a
    /// parameter or was reached by the sweep.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
