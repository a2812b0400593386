use super::gemm::gemm;
use super::InputGrads;
use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// (groups, m, k, n) for a 2-D or batched 3-D product.
fn dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Some((1, *m, *k, *n)),
        ([g, m, k], [g2, k2, n]) if g == g2 && k == k2 => Some((*g, *m, *k, *n)),
        _ => None,
    }
}

impl Tape<'_> {
    /// `(m,k)·(k,n)` or batched `(g,m,k)·(g,k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let Some((g, m, k, n)) = dims(av.shape(), bv.shape()) else {
            return shape_err("matmul", format!("{:?} · {:?}", av.shape(), bv.shape()));
        };
        let mut out = vec![0.0f32; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..],
                false,
                &bv.data()[i * k * n..],
                false,
                &mut out[i * m * n..],
                false,
            );
        }
        let shape = if av.rank() == 2 { vec![m, n] } else { vec![g, m, n] };
        self.push_op(Tensor::from_parts(shape, out), Op::MatMul, &[a, b])
    }
}

pub(super) fn matmul_backward(tape: &Tape<'_>, ins: &[Var], gout: &[f32], needs: &[bool]) -> InputGrads {
    let (av, bv) = (tape.value(ins[0]), tape.value(ins[1]));
    let (g, m, k, n) = dims(av.shape(), bv.shape()).expect("validated forward");
    let ga = needs[0].then(|| {
        let mut ga = vec![0.0f32; g * m * k];
        for i in 0..g {
            // dA = dC · Bᵀ
            gemm(m, n, k, &gout[i * m * n..], false, &bv.data()[i * k * n..], true, &mut ga[i * m * k..], false);
        }
        ga
    });
    let gb = needs[1].then(|| {
        let mut gb = vec![0.0f32; g * k * n];
        for i in 0..g {
            // dB = Aᵀ · dC
            gemm(k, m, n, &av.data()[i * m * k..], true, &gout[i * m * n..], false, &mut gb[i * k * n..], false);
        }
        gb
    });
    vec![ga, gb]
}
