use super::InputGrads;
use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape<'_> {
    /// Stride-1 "same" max pooling with an odd window; padding never wins.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4("max_pool2d")?;
        if kernel.is_multiple_of(2) {
            return shape_err("max_pool2d", format!("kernel {kernel} must be odd"));
        }
        let r = (kernel / 2) as isize;
        let src = xv.data();
        let mut out = vec![0.0f32; src.len()];
        let mut argmax = vec![0u32; src.len()];
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0usize;
                    for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                        for xs in (xx - r).max(0)..(xx + r + 1).min(w as isize) {
                            let i = yy as usize * w + xs as usize;
                            if plane[i] > best {
                                best = plane[i];
                                bi = i;
                            }
                        }
                    }
                    let o = p * h * w + y as usize * w + xx as usize;
                    out[o] = best;
                    argmax[o] = bi as u32;
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, h, w], out);
        self.push_op(out, Op::MaxPool2d { argmax }, &[x])
    }
}

pub(super) fn max_pool2d_backward(tape: &Tape<'_>, x: Var, argmax: &[u32], g: &[f32]) -> InputGrads {
    let s = tape.shape(x);
    let hw = s[2] * s[3];
    let mut gx = vec![0.0f32; g.len()];
    for (o, (&a, &gv)) in argmax.iter().zip(g).enumerate() {
        let plane = o / hw;
        gx[plane * hw + a as usize] += gv;
    }
    vec![Some(gx)]
}
