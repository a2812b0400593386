use super::InputGrads;
use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(tape: &Tape<'_>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(
            op,
            format!("operands {:?} and {:?} differ", tape.shape(a), tape.shape(b)),
        );
    }
    Ok(())
}

impl Tape<'_> {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_op(out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push_op(out, Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push_op(out, Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary(x, Op::Scale(c), |v| v * c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid, sigmoid_f32)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu, |v| v * sigmoid_f32(v))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp, f32::exp)
    }

    /// Elementwise arithmetic mean of equally shaped tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("mean_of", "no operands");
        };
        for &x in &xs[1..] {
            same_shape(self, "mean_of", first, x)?;
        }
        let n = xs.len() as f32;
        let mut acc = self.value(first).data().to_vec();
        for &x in &xs[1..] {
            acc.iter_mut().zip(self.value(x).data()).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::from_parts(self.shape(first).to_vec(), acc);
        self.push_op(out, Op::MeanOf, xs)
    }

    /// `y[b,c,..] = x[b,c,..] * scale[c] + shift[c]` for any tensor of rank >= 2.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return shape_err("channel_affine", format!("rank-{} input", xv.rank()));
        }
        let c = xv.shape()[1];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return shape_err(
                "channel_affine",
                format!(
                    "scale {:?}/shift {:?} must both be [{c}]",
                    self.shape(scale),
                    self.shape(shift)
                ),
            );
        }
        let inner: usize = xv.shape()[2..].iter().product();
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        let mut data = xv.data().to_vec();
        for (ci, chunk) in data.chunks_mut(inner).enumerate() {
            let ch = ci % c;
            chunk.iter_mut().for_each(|v| *v = *v * s[ch] + t[ch]);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_op(out, Op::ChannelAffine, &[x, scale, shift])
    }
}

pub(super) fn add_backward(g: &[f32], needs: &[bool]) -> InputGrads {
    needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
}

pub(super) fn mul_backward(tape: &Tape<'_>, ins: &[Var], g: &[f32], needs: &[bool]) -> InputGrads {
    let (a, b) = (tape.value(ins[0]).data(), tape.value(ins[1]).data());
    vec![
        needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
        needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
    ]
}

pub(super) fn sigmoid_backward(tape: &Tape<'_>, out: Var, g: &[f32]) -> InputGrads {
    let y = tape.value(out).data();
    vec![Some(g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]
}

pub(super) fn silu_backward(tape: &Tape<'_>, x: Var, g: &[f32]) -> InputGrads {
    let x = tape.value(x).data();
    vec![Some(
        g.iter()
            .zip(x)
            .map(|(g, &x)| {
                let s = sigmoid_f32(x);
                g * s * (1.0 + x * (1.0 - s))
            })
            .collect(),
    )]
}

pub(super) fn exp_backward(tape: &Tape<'_>, out: Var, g: &[f32]) -> InputGrads {
    let y = tape.value(out).data();
    vec![Some(g.iter().zip(y).map(|(g, y)| g * y).collect())]
}

pub(super) fn mean_of_backward(g: &[f32], needs: &[bool]) -> InputGrads {
    let n = needs.len() as f32;
    needs
        .iter()
        .map(|&need| need.then(|| g.iter().map(|v| v / n).collect()))
        .collect()
}

pub(super) fn channel_affine_backward(
    tape: &Tape<'_>,
    ins: &[Var],
    g: &[f32],
    needs: &[bool],
) -> InputGrads {
    let xv = tape.value(ins[0]);
    let c = xv.shape()[1];
    let inner: usize = xv.shape()[2..].iter().product();
    let s = tape.value(ins[1]).data();
    let mut gx = needs[0].then(|| vec![0.0f32; g.len()]);
    let mut gs = vec![0.0f64; c];
    let mut gt = vec![0.0f64; c];
    for (ci, (gc, xc)) in g.chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
        let ch = ci % c;
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[ci * inner..(ci + 1) * inner];
            dst.iter_mut().zip(gc).for_each(|(d, g)| *d = g * s[ch]);
        }
        gs[ch] += gc.iter().zip(xc).map(|(g, x)| (g * x) as f64).sum::<f64>();
        gt[ch] += gc.iter().map(|&g| g as f64).sum::<f64>();
    }
    vec![
        gx,
        needs[1].then(|| gs.iter().map(|&v| v as f32).collect()),
        needs[2].then(|| gt.iter().map(|&v| v as f32).collect()),
    ]
}
