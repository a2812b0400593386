use super::InputGrads;
use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Per-channel statistics of the batch seen by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance, as used for normalizing.
    pub var: Vec<f32>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
}

impl BatchStats {
    /// Unbiased variance, the convention for running estimates.
    pub fn unbiased_var(&self) -> Vec<f32> {
        let n = self.count as f32;
        let f = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * f).collect()
    }
}

impl Tape<'_> {
    /// Training-mode batch normalization over (B, H, W) of a 4-D tensor.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4("batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", format!("scale/shift must be [{c}]"));
        }
        let hw = h * w;
        let count = b * hw;
        let src = xv.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for (pi, plane) in src.chunks(hw).enumerate() {
            mean[pi % c] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (pi, plane) in src.chunks(hw).enumerate() {
            let m = mean[pi % c];
            var[pi % c] += plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; src.len()];
        let mut out = vec![0.0f32; src.len()];
        for (pi, (plane, (xh, o))) in src
            .chunks(hw)
            .zip(xhat.chunks_mut(hw).zip(out.chunks_mut(hw)))
            .enumerate()
        {
            let ch = pi % c;
            let (m, is) = (mean[ch] as f32, inv_std[ch]);
            for ((&v, xh), o) in plane.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - m) * is;
                *o = *xh * gm[ch] + bt[ch];
            }
        }
        let stats = BatchStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            var: var.iter().map(|&v| v as f32).collect(),
            count,
        };
        let keep = self.grad_enabled();
        let op = Op::BatchNorm {
            xhat: if keep { xhat } else { Vec::new() },
            inv_std,
        };
        let out = Tensor::from_parts(vec![b, c, h, w], out);
        Ok((self.push_op(out, op, &[x, gamma, beta])?, stats))
    }
}

pub(super) fn batch_norm_backward(
    tape: &Tape<'_>,
    ins: &[Var],
    xhat: &[f32],
    inv_std: &[f32],
    g: &[f32],
    needs: &[bool],
) -> InputGrads {
    let s = tape.shape(ins[0]);
    let (c, hw) = (s[1], s[2] * s[3]);
    let count = (s[0] * hw) as f64;
    let gamma = tape.value(ins[1]).data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (pi, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ch = pi % c;
        for (&gv, &xv) in gp.iter().zip(xp) {
            dgamma[ch] += (gv * xv) as f64;
            dbeta[ch] += gv as f64;
        }
    }
    let gx = needs[0].then(|| {
        let mut gx = vec![0.0f32; g.len()];
        for (pi, ((gp, xp), dp)) in g.chunks(hw).zip(xhat.chunks(hw)).zip(gx.chunks_mut(hw)).enumerate() {
            let ch = pi % c;
            let k = gamma[ch] * inv_std[ch];
            let mb = (dbeta[ch] / count) as f32;
            let mg = (dgamma[ch] / count) as f32;
            for ((&gv, &xv), d) in gp.iter().zip(xp).zip(dp.iter_mut()) {
                *d = k * (gv - mb - xv * mg);
            }
        }
        gx
    });
    vec![
        gx,
        needs[1].then(|| dgamma.iter().map(|&v| v as f32).collect()),
        needs[2].then(|| dbeta.iter().map(|&v| v as f32).collect()),
    ]
}
