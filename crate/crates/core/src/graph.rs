//! Single-use reverse-mode computation graph.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::ops::{self, OpKind};
use crate::params::ModelParams;
use crate::tensor::{Tensor, TensorError};

/// Index of a node inside its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Parameter name to gradient.
pub type Gradients = BTreeMap<String, Tensor>;

/// Numeric guards that fired while building the graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Rows whose norm fell below the cosine-similarity floor.
    pub clamped_norms: usize,
}

struct Node {
    op: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Tensor,
    aux: Vec<f64>,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    consumed: bool,
    diagnostics: Diagnostics,
}

/// Graph handles for every entry of a [`ModelParams`].
#[derive(Debug, Clone, Default)]
pub struct ParamNodes(BTreeMap<String, NodeId>);

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId, TensorError> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.0.iter()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    fn push(&mut self, op: Option<OpKind>, inputs: Vec<NodeId>, value: Tensor, aux: Vec<f64>, tracked: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
            tracked,
        });
        id
    }

    /// Adds a leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(None, Vec::new(), value.detach(), Vec::new(), false)
    }

    /// Adds a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(None, Vec::new(), value.detach(), Vec::new(), true);
        self.params.push((name.into(), id));
        id
    }

    /// Registers every entry of `params` as trainable.
    pub fn register(&mut self, params: &ModelParams) -> ParamNodes {
        ParamNodes(
            params
                .iter()
                .map(|(name, t)| (name.clone(), self.param(name.clone(), t.clone())))
                .collect(),
        )
    }

    /// Inserts every entry of `params` as a constant (inference).
    pub fn constants(&mut self, params: &ModelParams) -> ParamNodes {
        ParamNodes(
            params
                .iter()
                .map(|(name, t)| (name.clone(), self.constant(t.clone())))
                .collect(),
        )
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Runs `kind` on the given nodes and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let fwd = ops::forward(&kind, &values)?;
        self.diagnostics.clamped_norms += fwd.clamped;
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tracked);
        // Untracked results keep no backward state.
        let (op, aux) = if tracked { (Some(kind), fwd.aux) } else { (None, Vec::new()) };
        Ok(self.push(op, inputs.to_vec(), fwd.value, aux, tracked))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Concat { axis }, inputs)
    }

    pub fn slice(&mut self, a: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Slice { rows, cols }, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Reshape(shape.into()), &[a])
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId, TensorError> {
        self.apply(OpKind::GatherRows(indices), &[a])
    }

    pub fn row_softmax(&mut self, a: NodeId, tau: f64, exclude_diagonal: bool) -> Result<NodeId, TensorError> {
        self.apply(OpKind::RowSoftmax { tau, exclude_diagonal }, &[a])
    }

    pub fn row_log_softmax(&mut self, a: NodeId, tau: f64, exclude_diagonal: bool) -> Result<NodeId, TensorError> {
        self.apply(OpKind::RowLogSoftmax { tau, exclude_diagonal }, &[a])
    }

    pub fn cosine_similarity(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::CosineSimilarity, &[a])
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(OpKind::Conv1d, &[x, w, b])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId, TensorError> {
        self.apply(OpKind::CrossEntropy(labels), &[logits])
    }

    /// `x W + b` for a 2-D `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Back-propagates from a scalar `loss` and returns the gradient of
    /// every registered parameter. The graph can be differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::Reuse);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].tracked).collect();
            let input_grads = ops::backward(op, &inputs, &node.value, &node.aux, &g, &needs);
            for (input, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            // Free intermediate state; parameters keep their values.
            self.nodes[idx].aux = Vec::new();
        }
        let mut out = Gradients::new();
        for (name, id) in &self.params {
            let value = &self.nodes[id.0].value;
            let g = if id.0 <= loss.0 { grads[id.0].take() } else { None };
            let g = g.unwrap_or_else(|| vec![0.0; value.len()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let mut t = value.clone();
            t.set_grad(g.clone());
            let grad = Tensor::new(value.shape().to_vec(), g).expect("gradient shape matches parameter");
            self.nodes[id.0].value = t;
            match out.get_mut(name) {
                // A name registered twice accumulates.
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name.clone(), grad);
                }
            }
        }
        Ok(out)
    }
}

/// Applies a single operation outside any graph.
pub fn op_forward(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    ops::forward(&kind, inputs).map(|f| f.value)
}
