//! Forward implementations (as `Tape` methods) and their backward rules.

mod conv;
mod elementwise;
pub(crate) use elementwise::sigmoid_f32;
pub(crate) mod gemm;
mod matmul;
mod norm;
mod pool;
mod reduce;
mod shape;

use crate::error::Result;
use crate::tape::{BackwardRecord, Op, Tape, Var};

pub use norm::BatchStats;

/// Reducible axis of a `(B, C, H, W)` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    C,
    H,
    W,
}

impl Axis {
    pub fn dim(self) -> usize {
        match self {
            Axis::C => 1,
            Axis::H => 2,
            Axis::W => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

pub(crate) type InputGrads = Vec<Option<Vec<f32>>>;

pub(crate) fn backward(
    tape: &Tape<'_>,
    out: Var,
    rec: &BackwardRecord,
    g: &[f32],
    needs: &[bool],
) -> Result<InputGrads> {
    let ins = &rec.inputs;
    Ok(match &rec.op {
        Op::Add => elementwise::add_backward(g, needs),
        Op::Mul => elementwise::mul_backward(tape, ins, g, needs),
        Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::Sigmoid => elementwise::sigmoid_backward(tape, out, g),
        Op::Silu => elementwise::silu_backward(tape, ins[0], g),
        Op::Exp => elementwise::exp_backward(tape, out, g),
        Op::MeanOf => elementwise::mean_of_backward(g, needs),
        Op::ChannelAffine => elementwise::channel_affine_backward(tape, ins, g, needs),
        Op::Conv2d {
            stride,
            padding,
            cols,
        } => conv::conv2d_backward(tape, ins, *stride, *padding, cols.as_deref(), g, needs)?,
        Op::PoolAxis { axis, mode, argmax } => {
            reduce::pool_axis_backward(tape, ins[0], *axis, *mode, argmax, g)
        }
        Op::BroadcastTo => shape::broadcast_backward(tape, ins[0], out, g),
        Op::Concat { axis } => shape::concat_backward(tape, ins, *axis, g, needs),
        Op::Slice { axis, start } => shape::slice_backward(tape, ins[0], out, *axis, *start, g),
        Op::Upsample2x => shape::upsample_backward(tape, ins[0], g),
        Op::MatMul => matmul::matmul_backward(tape, ins, g, needs),
        Op::Softmax { axis } => reduce::softmax_backward(tape, out, *axis, g),
        Op::MeanAll => {
            let n = tape.value(ins[0]).numel();
            vec![Some(vec![g[0] / n as f32; n])]
        }
        Op::SumAll => vec![Some(vec![g[0]; tape.value(ins[0]).numel()])],
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Permute { perm } => shape::permute_backward(tape, out, perm, g),
        Op::MaxPool2d { argmax } => pool::max_pool2d_backward(tape, ins[0], argmax, g),
        Op::BatchNorm { xhat, inv_std } => norm::batch_norm_backward(tape, ins, xhat, inv_std, g, needs),
        Op::Precomputed { grads } => grads
            .iter()
            .map(|gr| Some(gr.iter().map(|v| v * g[0]).collect()))
            .collect(),
    })
}
