use super::gemm::gemm;
use super::InputGrads;
use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output range along one axis for kernel offset `k`:
    /// `o` with `0 <= o*stride + k - pad < extent`.
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi = ((extent as isize - 1 + p - k).div_euclid(s) + 1).clamp(0, out as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn im2col(x: &[f32], g: &Geom, cols: &mut [f32]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy0, oy1) = g.valid(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let (ox0, ox1) = g.valid(kj, g.w, g.wo);
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * n..][..n];
                row.fill(0.0);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if ox0 == ox1 {
                        continue;
                    }
                    if g.stride == 1 {
                        let ix0 = ox0 + kj - g.pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geom, dx: &mut [f32]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy0, oy1) = g.valid(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let (ox0, ox1) = g.valid(kj, g.w, g.wo);
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * n..][..n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + kj - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Geom)> {
    let ([b, cin, h, wd], [cout, wcin, kh, kw]) = (x, w) else {
        return shape_err("conv2d", format!("input {x:?} and weight {w:?} must both be 4-D"));
    };
    if cin != wcin {
        return shape_err("conv2d", format!("input has {cin} channels, weight expects {wcin}"));
    }
    if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
        return shape_err("conv2d", format!("kernel {kh}x{kw} must be odd, stride {stride} >= 1"));
    }
    if h + 2 * pad < *kh || wd + 2 * pad < *kw {
        return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    Ok((
        *b,
        *cout,
        Geom {
            cin: *cin,
            h: *h,
            w: *wd,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

impl Tape<'_> {
    /// 2-D cross-correlation, `(B,Cin,H,W) ⋆ (Cout,Cin,kh,kw) -> (B,Cout,H',W')`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let (b, cout, g) = geometry(xv.shape(), wv.shape(), stride, padding)?;
        if let Some(bias) = bias {
            if self.shape(bias) != [cout] {
                return shape_err("conv2d", format!("bias {:?} must be [{cout}]", self.shape(bias)));
            }
        }
        let (k, n) = (g.rows(), g.cols());
        let in_sz = g.cin * g.h * g.w;
        let keep_cols = !g.pointwise() && self.wants_grad(weight);
        let mut saved = if keep_cols { vec![0.0f32; b * k * n] } else { Vec::new() };
        let mut scratch = if g.pointwise() || keep_cols { Vec::new() } else { vec![0.0f32; k * n] };
        let mut out = vec![0.0f32; b * cout * n];
        let xd = xv.data();
        for bi in 0..b {
            let xb = &xd[bi * in_sz..(bi + 1) * in_sz];
            let cols: &[f32] = if g.pointwise() {
                xb
            } else {
                let buf = if keep_cols { &mut saved[bi * k * n..(bi + 1) * k * n] } else { &mut scratch[..] };
                im2col(xb, &g, buf);
                buf
            };
            gemm(cout, k, n, wv.data(), false, cols, false, &mut out[bi * cout * n..], false);
        }
        let mut inputs = vec![x, weight];
        if let Some(bias) = bias {
            let bd = self.value(bias).data();
            for (ci, chunk) in out.chunks_mut(n).enumerate() {
                let bv = bd[ci % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            inputs.push(bias);
        }
        let out = Tensor::from_parts(vec![b, cout, g.ho, g.wo], out);
        let op = Op::Conv2d {
            stride,
            padding,
            cols: keep_cols.then_some(saved),
        };
        self.push_op(out, op, &inputs)
    }
}

pub(super) fn conv2d_backward(
    tape: &Tape<'_>,
    ins: &[Var],
    stride: usize,
    padding: usize,
    saved: Option<&[f32]>,
    gout: &[f32],
    needs: &[bool],
) -> Result<InputGrads> {
    let (xv, wv) = (tape.value(ins[0]), tape.value(ins[1]));
    let (b, cout, g) = geometry(xv.shape(), wv.shape(), stride, padding)?;
    let (k, n) = (g.rows(), g.cols());
    let in_sz = g.cin * g.h * g.w;

    let mut gw = needs[1].then(|| vec![0.0f32; cout * k]);
    let mut gx = needs[0].then(|| vec![0.0f32; b * in_sz]);
    let mut scratch = Vec::new();
    let mut dcols = if needs[0] && !g.pointwise() { vec![0.0f32; k * n] } else { Vec::new() };
    for bi in 0..b {
        let gb = &gout[bi * cout * n..(bi + 1) * cout * n];
        if let Some(gw) = gw.as_mut() {
            let xb = &xv.data()[bi * in_sz..(bi + 1) * in_sz];
            let cols: &[f32] = if g.pointwise() {
                xb
            } else if let Some(saved) = saved {
                &saved[bi * k * n..(bi + 1) * k * n]
            } else {
                scratch.resize(k * n, 0.0);
                im2col(xb, &g, &mut scratch);
                &scratch
            };
            // dW += dY · colsᵀ
            gemm(cout, n, k, gb, false, cols, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            let dxb = &mut gx[bi * in_sz..(bi + 1) * in_sz];
            if g.pointwise() {
                gemm(k, cout, n, wv.data(), true, gb, false, dxb, false);
            } else {
                // dcols = Wᵀ · dY, scattered back onto the input grid
                gemm(k, cout, n, wv.data(), true, gb, false, &mut dcols, false);
                col2im(&dcols, &g, dxb);
            }
        }
    }
    let gbias = (ins.len() > 2 && needs[2]).then(|| {
        let mut acc = vec![0.0f64; cout];
        for (ci, chunk) in gout.chunks(n).enumerate() {
            acc[ci % cout] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        acc.into_iter().map(|v| v as f32).collect()
    });
    let mut grads = vec![gx, gw];
    if ins.len() > 2 {
        grads.push(gbias);
    }
    Ok(grads)
}
