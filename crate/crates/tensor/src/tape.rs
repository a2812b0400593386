//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its output and, when any input requires a
//! gradient, a [`BackwardRecord`]. Inputs always precede outputs on the tape, so
//! the lineage graph is acyclic by construction and a single reverse sweep over
//! node indices is a valid topological order.

use crate::error::{Result, TensorError};
use crate::ops::{self, Axis, PoolMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kind plus whatever the backward rule needs from the forward pass.
#[derive(Debug)]
pub enum Op {
    Add,
    Mul,
    Scale(f32),
    Sigmoid,
    Silu,
    Exp,
    Conv2d {
        stride: usize,
        padding: usize,
        /// im2col buffers per batch item; `None` for pointwise convolutions.
        cols: Option<Vec<f32>>,
    },
    PoolAxis {
        axis: Axis,
        mode: PoolMode,
        argmax: Vec<u32>,
    },
    BroadcastTo,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    Upsample2x,
    MatMul,
    Softmax {
        axis: usize,
    },
    MeanAll,
    SumAll,
    Reshape,
    Permute {
        perm: Vec<usize>,
    },
    MaxPool2d {
        argmax: Vec<u32>,
    },
    BatchNorm {
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    ChannelAffine,
    MeanOf,
    /// Scalar function whose input gradients were computed alongside its value.
    Precomputed {
        grads: Vec<Vec<f32>>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sigmoid => "sigmoid",
            Op::Silu => "silu",
            Op::Exp => "exp",
            Op::Conv2d { .. } => "conv2d",
            Op::PoolAxis { .. } => "pool_axis",
            Op::BroadcastTo => "broadcast_to",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Upsample2x => "upsample_nearest",
            Op::MatMul => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::MeanAll => "mean_all",
            Op::SumAll => "sum_all",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine => "channel_affine",
            Op::MeanOf => "mean_of",
            Op::Precomputed { .. } => "precomputed",
        }
    }
}

#[derive(Debug)]
pub struct BackwardRecord {
    pub op: Op,
    pub inputs: Vec<Var>,
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    record: Option<BackwardRecord>,
}

/// Recording of one forward computation.
///
/// A tape optionally borrows a [`ParamStore`]; parameters enter the graph
/// through [`Tape::param`] without being copied.
pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// Inference tape: nothing requires gradients and no backward state is kept.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push_node(Node {
            value: Value::Owned(value),
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
            record: None,
        }))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Graph handle for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| TensorError::Contract("tape has no parameter store".into()))?;
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return Ok(v);
        }
        let p = store.get(id);
        if !p.value.is_finite() {
            return Err(TensorError::NonFinite { op: "param" });
        }
        let var = self.push_node(Node {
            value: Value::Param(id),
            requires_grad: self.grad_enabled && p.kind.is_trainable(),
            grad: None,
            record: None,
        });
        self.param_vars[id.0] = Some(var);
        Ok(var)
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("param node without store")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn record(&self, v: Var) -> Option<&BackwardRecord> {
        self.nodes[v.0].record.as_ref()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.0).copied().flatten()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f32]> {
        self.param_var(id).and_then(|v| self.grad(v))
    }

    /// Moves parameter gradients out of the tape.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.nodes[v.0].grad.take() {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Appends an op result. The record is dropped when no input needs a gradient.
    pub(crate) fn push_op(&mut self, out: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| BackwardRecord {
            op,
            inputs: inputs.to_vec(),
        });
        Ok(self.push_node(Node {
            value: Value::Owned(out),
            requires_grad,
            grad: None,
            record,
        }))
    }

    /// Scalar node computed outside the tape, with `grads[i]` the partial
    /// derivatives of `value` with respect to `inputs[i]`.
    pub fn precomputed_scalar(&mut self, inputs: &[Var], value: f32, grads: Vec<Vec<f32>>) -> Result<Var> {
        if grads.len() != inputs.len() {
            return Err(TensorError::Contract(format!(
                "{} gradient buffers for {} inputs",
                grads.len(),
                inputs.len()
            )));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if g.len() != self.value(*v).numel() {
                return Err(TensorError::Shape {
                    op: "precomputed",
                    msg: format!("gradient length {} for input {:?}", g.len(), self.shape(*v)),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "precomputed" });
            }
        }
        self.push_op(Tensor::scalar(value), Op::Precomputed { grads }, inputs)
    }

    /// Whether the forward pass should bother saving state for input `v`.
    pub(crate) fn wants_grad(&self, v: Var) -> bool {
        self.grad_enabled && self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(rec) = &self.nodes[i].record else {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            };
            let needs: Vec<bool> = rec.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = ops::backward(self, Var(i), rec, &g, &needs)?;
            debug_assert_eq!(input_grads.len(), rec.inputs.len());
            for ((inp, ig), need) in rec.inputs.iter().zip(input_grads).zip(needs) {
                let Some(ig) = ig else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.value(*inp).numel(), "{} backward", rec.op.name());
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}
