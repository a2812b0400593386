//! Composite layers shared by backbone, neck and heads.

use std::time::{Duration, Instant};

use fsayolo_tensor::{BatchStats, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-3;
pub const BN_MOMENTUM: f32 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize and are queued as running-stat updates.
    Train,
    /// Running statistics normalize.
    Eval,
}

/// Running-statistics update produced by one training-mode normalization.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

impl NormUpdate {
    /// `running = (1 - momentum)·running + momentum·batch`, unbiased variance.
    pub fn apply(&self, store: &mut ParamStore) {
        let m = BN_MOMENTUM;
        for (r, b) in store.value_mut(self.mean).data_mut().iter_mut().zip(&self.stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let uv = self.stats.unbiased_var();
        for (r, b) in store.value_mut(self.var).data_mut().iter_mut().zip(&uv) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Forward context: the tape being recorded plus the normalization mode.
pub struct Cx<'a, 's> {
    pub tape: &'a mut Tape<'s>,
    pub mode: Mode,
    updates: Vec<NormUpdate>,
    timings: Option<Vec<(&'static str, Duration)>>,
}

impl<'a, 's> Cx<'a, 's> {
    pub fn new(tape: &'a mut Tape<'s>, mode: Mode) -> Self {
        Self {
            tape,
            mode,
            updates: Vec::new(),
            timings: None,
        }
    }

    /// Start recording wall time spent in each [`Cx::timed`] section.
    pub fn profiled(mut self) -> Self {
        self.timings = Some(Vec::new());
        self
    }

    pub fn take_timings(&mut self) -> Vec<(&'static str, Duration)> {
        self.timings.take().unwrap_or_default()
    }

    pub fn timed<T>(&mut self, section: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        if self.timings.is_none() {
            return f(self);
        }
        let start = Instant::now();
        let out = f(self)?;
        let dt = start.elapsed();
        if let Some(t) = &mut self.timings {
            match t.iter_mut().find(|(s, _)| *s == section) {
                Some((_, acc)) => *acc += dt,
                None => t.push((section, dt)),
            }
        }
        Ok(out)
    }

    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.updates)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        Ok(self.tape.param(id)?)
    }
}

/// Registers parameters under hierarchical names with seeded initialization.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming-uniform, bound `sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f32).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.store.add(name, ParamKind::Weight, t)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], kind: ParamKind, v: f32) -> ParamId {
        self.store.add(name, kind, Tensor::full(shape, v))
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    /// Conv (no bias) → batch norm → SiLU, "same" padding.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: pb.kaiming(&format!("{name}.conv.weight"), &[cout, cin, kernel, kernel]),
            gamma: pb.filled(&format!("{name}.bn.weight"), &[cout], ParamKind::NormScale, 1.0),
            beta: pb.filled(&format!("{name}.bn.bias"), &[cout], ParamKind::NormShift, 0.0),
            running_mean: pb.filled(&format!("{name}.bn.running_mean"), &[cout], ParamKind::RunningMean, 0.0),
            running_var: pb.filled(&format!("{name}.bn.running_var"), &[cout], ParamKind::RunningVar, 1.0),
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn forward(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        let y = self.conv(cx, x)?;
        let y = self.normalize(cx, y)?;
        Ok(cx.tape.silu(y)?)
    }

    pub fn conv(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight)?;
        Ok(cx.tape.conv2d(x, w, None, self.stride, self.kernel / 2)?)
    }

    pub fn normalize(&self, cx: &mut Cx<'_, '_>, y: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma)?, cx.param(self.beta)?);
        match cx.mode {
            Mode::Train => {
                let (out, stats) = cx.tape.batch_norm(y, g, b, BN_EPS)?;
                cx.updates.push(NormUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(out)
            }
            Mode::Eval => {
                // fold running statistics into a per-channel affine map
                let (rm, rv) = (cx.param(self.running_mean)?, cx.param(self.running_var)?);
                let rm = cx.tape.value(rm).data().to_vec();
                let rv = cx.tape.value(rv).data().to_vec();
                let inv: Vec<f32> = rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let shift: Vec<f32> = rm.iter().zip(&inv).map(|(m, s)| -m * s).collect();
                let inv = cx.tape.constant(Tensor::new(&[self.cout], inv)?)?;
                let shift = cx.tape.constant(Tensor::new(&[self.cout], shift)?)?;
                let scaled = cx.tape.channel_affine(y, inv, shift)?;
                Ok(cx.tape.channel_affine(scaled, g, b)?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize, shortcut: bool) -> Self {
        Self {
            cv1: ConvBlock::new(pb, &format!("{name}.cv1"), c, c, 1, 1),
            cv2: ConvBlock::new(pb, &format!("{name}.cv2"), c, c, 3, 1),
            shortcut,
        }
    }

    pub fn forward(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(cx, x)?;
        let y = self.cv2.forward(cx, y)?;
        Ok(if self.shortcut { cx.tape.add(x, y)? } else { y })
    }
}

/// Multi-head self-attention over the `H·W` spatial tokens, residual output.
///
/// No positional encoding, so the block is equivariant to token permutations.
#[derive(Clone, Debug)]
pub struct MhsaBlock {
    pub heads: usize,
    pub channels: usize,
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
    pub residual: bool,
}

impl MhsaBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config("mhsa_heads", format!("{heads} heads do not divide {channels} channels")));
        }
        let mut proj = |p: &str| {
            (
                pb.kaiming(&format!("{name}.{p}.weight"), &[channels, channels, 1, 1]),
                pb.filled(&format!("{name}.{p}.bias"), &[channels], ParamKind::Bias, 0.0),
            )
        };
        Ok(Self {
            heads,
            channels,
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
            out: proj("out"),
            residual: true,
        })
    }

    fn project(&self, cx: &mut Cx<'_, '_>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (cx.param(w)?, cx.param(b)?);
        Ok(cx.tape.conv2d(x, w, Some(b), 1, 0)?)
    }

    pub fn forward(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }

    /// Output plus the `(B·heads, N, N)` attention weights.
    pub fn forward_with_weights(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<(Var, Var)> {
        let shape = cx.tape.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::Contract(format!("attention input must be 4-D, got {shape:?}")));
        };
        if c != self.channels {
            return Err(Error::Contract(format!("attention expects {} channels, got {c}", self.channels)));
        }
        let (g, d, n) = (b * self.heads, c / self.heads, h * w);
        let q = self.project(cx, x, self.q)?;
        let k = self.project(cx, x, self.k)?;
        let v = self.project(cx, x, self.v)?;
        let q = cx.tape.reshape(q, &[g, d, n])?;
        let k = cx.tape.reshape(k, &[g, d, n])?;
        let v = cx.tape.reshape(v, &[g, d, n])?;
        let qt = cx.tape.permute(q, &[0, 2, 1])?;
        let scores = cx.tape.matmul(qt, k)?;
        let scores = cx.tape.scale(scores, 1.0 / (d as f32).sqrt())?;
        let attn = cx.tape.softmax(scores, 2)?;
        let attn_t = cx.tape.permute(attn, &[0, 2, 1])?;
        let mixed = cx.tape.matmul(v, attn_t)?;
        let mixed = cx.tape.reshape(mixed, &shape)?;
        let y = self.project(cx, mixed, self.out)?;
        let y = if self.residual { cx.tape.add(x, y)? } else { y };
        Ok((y, attn))
    }
}

#[derive(Clone, Debug)]
pub enum CspInner {
    Bottlenecks(Vec<Bottleneck>),
    Attention(MhsaBlock),
}

/// CSP stage (YOLOv5 "C3"): two 1×1 branches, one through the inner stack,
/// concatenated and merged by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct CspStage {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub inner: CspInner,
    pub cv3: ConvBlock,
}

impl CspStage {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, depth: usize, shortcut: bool) -> Self {
        let h = cout / 2;
        let cv1 = ConvBlock::new(pb, &format!("{name}.cv1"), cin, h, 1, 1);
        let cv2 = ConvBlock::new(pb, &format!("{name}.cv2"), cin, h, 1, 1);
        let inner = CspInner::Bottlenecks(
            (0..depth)
                .map(|i| Bottleneck::new(pb, &format!("{name}.m.{i}"), h, shortcut))
                .collect(),
        );
        let cv3 = ConvBlock::new(pb, &format!("{name}.cv3"), 2 * h, cout, 1, 1);
        Self { cv1, cv2, inner, cv3 }
    }

    /// CSP stage whose bottleneck stack is replaced by self-attention.
    pub fn with_attention(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, heads: usize) -> Result<Self> {
        let h = cout / 2;
        let cv1 = ConvBlock::new(pb, &format!("{name}.cv1"), cin, h, 1, 1);
        let cv2 = ConvBlock::new(pb, &format!("{name}.cv2"), cin, h, 1, 1);
        let inner = CspInner::Attention(MhsaBlock::new(pb, &format!("{name}.attn"), h, heads)?);
        let cv3 = ConvBlock::new(pb, &format!("{name}.cv3"), 2 * h, cout, 1, 1);
        Ok(Self { cv1, cv2, inner, cv3 })
    }

    pub fn forward(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        let mut a = self.cv1.forward(cx, x)?;
        match &self.inner {
            CspInner::Bottlenecks(stack) => {
                for m in stack {
                    a = m.forward(cx, a)?;
                }
            }
            CspInner::Attention(attn) => a = attn.forward(cx, a)?,
        }
        let b = self.cv2.forward(cx, x)?;
        let cat = cx.tape.concat(&[a, b], 1)?;
        self.cv3.forward(cx, cat)
    }
}

/// Spatial pyramid pooling, fast variant: three chained 5×5 max-pools.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
}

pub const SPPF_KERNEL: usize = 5;

impl Sppf {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize) -> Self {
        let h = cin / 2;
        Self {
            cv1: ConvBlock::new(pb, &format!("{name}.cv1"), cin, h, 1, 1),
            cv2: ConvBlock::new(pb, &format!("{name}.cv2"), 4 * h, cout, 1, 1),
        }
    }

    /// The concatenated `[x, p1, p2, p3]` map before the merge conv.
    pub fn pyramid(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        let x = self.cv1.forward(cx, x)?;
        let p1 = cx.tape.max_pool2d(x, SPPF_KERNEL)?;
        let p2 = cx.tape.max_pool2d(p1, SPPF_KERNEL)?;
        let p3 = cx.tape.max_pool2d(p2, SPPF_KERNEL)?;
        Ok(cx.tape.concat(&[x, p1, p2, p3], 1)?)
    }

    pub fn forward(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        let cat = self.pyramid(cx, x)?;
        self.cv2.forward(cx, cat)
    }
}
