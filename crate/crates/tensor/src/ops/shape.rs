use super::reduce::split_axis;
use super::InputGrads;
use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel, Tensor};

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Visits every element of `out_shape` in row-major order, passing the output
/// position and the source offset given per-output-axis source strides.
fn for_each_strided(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let (n_last, s_last) = (out_shape[last], src_strides[last]);
    let rows = numel(&out_shape[..last]);
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    for row in 0..rows {
        let mut off = base;
        for j in 0..n_last {
            f(row * n_last + j, off);
            off += s_last;
        }
        // odometer increment over the leading axes
        for a in (0..last).rev() {
            idx[a] += 1;
            base += src_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            base -= src_strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
}

impl Tape<'_> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", xv.shape()));
        }
        let out = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        self.push_op(out, Op::Reshape, &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("invalid permutation {perm:?} for rank {rank}"));
        }
        let in_strides = row_major_strides(xv.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = xv.data();
        let mut out = vec![0.0f32; src.len()];
        for_each_strided(&out_shape, &src_strides, |o, s| out[o] = src[s]);
        let out = Tensor::from_parts(out_shape, out);
        self.push_op(out, Op::Permute { perm: perm.to_vec() }, &[x])
    }

    /// Replicates extents of 1 up to `shape`; ranks must match.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != shape.len()
            || xv.shape().iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return shape_err("broadcast_to", format!("{:?} -> {shape:?}", xv.shape()));
        }
        let strides = broadcast_strides(xv.shape());
        let src = xv.data();
        let mut out = vec![0.0f32; numel(shape)];
        for_each_strided(shape, &strides, |o, s| out[o] = src[s]);
        let out = Tensor::from_parts(shape.to_vec(), out);
        self.push_op(out, Op::BroadcastTo, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "no operands");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let xv = self.value(x);
                let chunk = xv.shape()[axis] * inner;
                out.extend_from_slice(&xv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_parts(shape, out);
        self.push_op(out, Op::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || len == 0 || start + len > xv.shape()[axis] {
            return shape_err(
                "slice",
                format!("[{start}..{}] on axis {axis} of {:?}", start + len, xv.shape()),
            );
        }
        let (outer, ext, inner) = split_axis(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * ext + start) * inner;
            out.extend_from_slice(&xv.data()[from..from + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, out);
        self.push_op(out, Op::Slice { axis, start }, &[x])
    }

    /// Nearest-neighbour ×2 upsampling of a 4-D tensor.
    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4("upsample_nearest")?;
        let (h2, w2) = (2 * h, 2 * w);
        let src = xv.data();
        let mut out = vec![0.0f32; b * c * h2 * w2];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                let srow = &s[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut d[y * w2..(y + 1) * w2];
                for (xx, v) in drow.iter_mut().enumerate() {
                    *v = srow[xx / 2];
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, h2, w2], out);
        self.push_op(out, Op::Upsample2x, &[x])
    }
}

fn broadcast_strides(src_shape: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(src_shape);
    src_shape
        .iter()
        .zip(strides)
        .map(|(&d, s)| if d == 1 { 0 } else { s })
        .collect()
}

pub(super) fn broadcast_backward(tape: &Tape<'_>, x: Var, out: Var, g: &[f32]) -> InputGrads {
    let strides = broadcast_strides(tape.shape(x));
    let mut gx = vec![0.0f64; tape.value(x).numel()];
    for_each_strided(tape.shape(out), &strides, |o, s| gx[s] += g[o] as f64);
    vec![Some(gx.into_iter().map(|v| v as f32).collect())]
}

pub(super) fn permute_backward(tape: &Tape<'_>, out: Var, perm: &[usize], g: &[f32]) -> InputGrads {
    // scatter back through the same strided walk used forward
    let out_shape = tape.shape(out);
    let mut in_shape = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        in_shape[p] = out_shape[i];
    }
    let in_strides = row_major_strides(&in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut gx = vec![0.0f32; g.len()];
    for_each_strided(out_shape, &src_strides, |o, s| gx[s] = g[o]);
    vec![Some(gx)]
}

pub(super) fn concat_backward(
    tape: &Tape<'_>,
    ins: &[Var],
    axis: usize,
    g: &[f32],
    needs: &[bool],
) -> InputGrads {
    let total: usize = ins.iter().map(|&x| tape.shape(x)[axis]).sum();
    let (outer, _, inner) = split_axis(tape.shape(ins[0]), axis);
    let mut offset = 0;
    let mut grads = Vec::with_capacity(ins.len());
    for (&x, &need) in ins.iter().zip(needs) {
        let ext = tape.shape(x)[axis];
        if need {
            let mut gx = Vec::with_capacity(outer * ext * inner);
            for o in 0..outer {
                let from = (o * total + offset) * inner;
                gx.extend_from_slice(&g[from..from + ext * inner]);
            }
            grads.push(Some(gx));
        } else {
            grads.push(None);
        }
        offset += ext;
    }
    grads
}

pub(super) fn slice_backward(
    tape: &Tape<'_>,
    x: Var,
    out: Var,
    axis: usize,
    start: usize,
    g: &[f32],
) -> InputGrads {
    let (outer, ext, inner) = split_axis(tape.shape(x), axis);
    let len = tape.shape(out)[axis];
    let mut gx = vec![0.0f32; outer * ext * inner];
    for o in 0..outer {
        let to = (o * ext + start) * inner;
        gx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    vec![Some(gx)]
}

pub(super) fn upsample_backward(tape: &Tape<'_>, x: Var, g: &[f32]) -> InputGrads {
    let s = tape.shape(x);
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let w2 = 2 * w;
    let mut gx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += gp[y * w2 + xx];
            }
        }
    }
    vec![Some(gx)]
}
