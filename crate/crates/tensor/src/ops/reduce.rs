use super::{Axis, InputGrads, PoolMode};
use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// (outer, extent, inner) view of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape<'_> {
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / xv.numel() as f64) as f32);
        self.push_op(out, Op::MeanAll, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push_op(Tensor::scalar(s as f32), Op::SumAll, &[x])
    }

    /// Reduces one of the C/H/W axes of a 4-D tensor to extent 1.
    ///
    /// Max mode routes the gradient to the first maximal element.
    pub fn pool_axis(&mut self, x: Var, axis: Axis, mode: PoolMode) -> Result<Var> {
        let xv = self.value(x);
        xv.dims4("pool_axis")?;
        let d = axis.dim();
        let (outer, len, inner) = split_axis(xv.shape(), d);
        let src = xv.data();
        let mut out = vec![0.0f32; outer * inner];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Mean => {
                let mut acc = vec![0.0f64; inner];
                for o in 0..outer {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for l in 0..len {
                        let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                    }
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut()
                        .zip(&acc)
                        .for_each(|(d, a)| *d = (a / len as f64) as f32);
                }
            }
            PoolMode::Max => {
                argmax = vec![0u32; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = src[o * len * inner + i];
                        let mut bi = 0;
                        for l in 1..len {
                            let v = src[(o * len + l) * inner + i];
                            if v > best {
                                best = v;
                                bi = l;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = bi as u32;
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[d] = 1;
        let out = Tensor::from_parts(shape, out);
        self.push_op(out, Op::PoolAxis { axis, mode, argmax }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return shape_err("softmax", format!("axis {axis} for shape {:?}", xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[at(l)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for l in 0..len {
                    let e = ((src[at(l)] - m) as f64).exp();
                    out[at(l)] = e as f32;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] = (out[at(l)] as f64 / sum) as f32;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push_op(out, Op::Softmax { axis }, &[x])
    }
}

pub(super) fn pool_axis_backward(
    tape: &Tape<'_>,
    x: Var,
    axis: Axis,
    mode: PoolMode,
    argmax: &[u32],
    g: &[f32],
) -> InputGrads {
    let shape = tape.shape(x);
    let (outer, len, inner) = split_axis(shape, axis.dim());
    let mut gx = vec![0.0f32; outer * len * inner];
    for o in 0..outer {
        for i in 0..inner {
            let go = g[o * inner + i];
            match mode {
                PoolMode::Mean => {
                    let v = go / len as f32;
                    for l in 0..len {
                        gx[(o * len + l) * inner + i] = v;
                    }
                }
                PoolMode::Max => {
                    let l = argmax[o * inner + i] as usize;
                    gx[(o * len + l) * inner + i] = go;
                }
            }
        }
    }
    vec![Some(gx)]
}

pub(super) fn softmax_backward(tape: &Tape<'_>, out: Var, axis: usize, g: &[f32]) -> InputGrads {
    let yv = tape.value(out);
    let (outer, len, inner) = split_axis(yv.shape(), axis);
    let y = yv.data();
    let mut gx = vec![0.0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let dot: f64 = (0..len).map(|l| (g[at(l)] * y[at(l)]) as f64).sum();
            for l in 0..len {
                gx[at(l)] = y[at(l)] * (g[at(l)] - dot as f32);
            }
        }
    }
    vec![Some(gx)]
}
