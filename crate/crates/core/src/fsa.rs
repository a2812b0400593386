//! Full-separation attention.
//!
//! The input is pooled separately over H, W and C. The H- and W-pooled maps go
//! through squeeze-and-excitation channel gates, the C-pooled map through a
//! k×k spatial gate. The three sigmoid maps are broadcast back to the input
//! shape, averaged into a per-pixel importance map `A`, and the output is
//! `x ⊙ A`.

use fsayolo_tensor::{Axis, ParamId, ParamKind, PoolMode, Var};

use crate::error::{Error, Result};
use crate::nn::{Cx, ParamBuilder};

/// Two 1×1 projections `C → C/r → C` with SiLU between.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SeGate {
    /// The output projection starts at zero so the gate opens at exactly 0.5.
    fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize, r: usize) -> Self {
        let hidden = c / r;
        Self {
            w1: pb.kaiming(&format!("{name}.fc1.weight"), &[hidden, c, 1, 1]),
            b1: pb.filled(&format!("{name}.fc1.bias"), &[hidden], ParamKind::Bias, 0.0),
            w2: pb.filled(&format!("{name}.fc2.weight"), &[c, hidden, 1, 1], ParamKind::Weight, 0.0),
            b2: pb.filled(&format!("{name}.fc2.bias"), &[c], ParamKind::Bias, 0.0),
        }
    }

    /// Pre-sigmoid logits.
    fn logits(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (cx.param(self.w1)?, cx.param(self.b1)?, cx.param(self.w2)?, cx.param(self.b2)?);
        let h = cx.tape.conv2d(x, w1, Some(b1), 1, 0)?;
        let h = cx.tape.silu(h)?;
        Ok(cx.tape.conv2d(h, w2, Some(b2), 1, 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct FsaModule {
    pub channels: usize,
    pub r: usize,
    pub k: usize,
    pub gate_h: SeGate,
    pub gate_w: SeGate,
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
}

/// Gated branch maps, each already broadcast to the input shape.
#[derive(Clone, Copy, Debug)]
pub struct FsaBranches {
    pub h: Var,
    pub w: Var,
    pub c: Var,
}

impl FsaModule {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, r: usize, k: usize) -> Result<Self> {
        if r == 0 || !channels.is_multiple_of(r) {
            return Err(Error::config("fsa_r", format!("{r} does not divide {channels} channels")));
        }
        if k.is_multiple_of(2) {
            return Err(Error::config("fsa_k", format!("kernel {k} must be odd")));
        }
        Ok(Self {
            channels,
            r,
            k,
            gate_h: SeGate::new(pb, &format!("{name}.gate_h"), channels, r),
            gate_w: SeGate::new(pb, &format!("{name}.gate_w"), channels, r),
            spatial_w: pb.filled(&format!("{name}.spatial.weight"), &[1, 1, k, k], ParamKind::Weight, 0.0),
            spatial_b: pb.filled(&format!("{name}.spatial.bias"), &[1], ParamKind::Bias, 0.0),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let g = |s: &SeGate| [s.w1, s.b1, s.w2, s.b2];
        let mut ids: Vec<ParamId> = g(&self.gate_h).into_iter().chain(g(&self.gate_w)).collect();
        ids.extend([self.spatial_w, self.spatial_b]);
        ids
    }

    pub fn branches(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<FsaBranches> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Contract(format!(
                "attention module expects (B,{},H,W), got {shape:?}",
                self.channels
            )));
        }
        let ph = cx.tape.pool_axis(x, Axis::H, PoolMode::Mean)?;
        let gh = self.gate_h.logits(cx, ph)?;
        let gh = cx.tape.sigmoid(gh)?;
        let pw = cx.tape.pool_axis(x, Axis::W, PoolMode::Mean)?;
        let gw = self.gate_w.logits(cx, pw)?;
        let gw = cx.tape.sigmoid(gw)?;
        let pc = cx.tape.pool_axis(x, Axis::C, PoolMode::Mean)?;
        let (sw, sb) = (cx.param(self.spatial_w)?, cx.param(self.spatial_b)?);
        let gc = cx.tape.conv2d(pc, sw, Some(sb), 1, self.k / 2)?;
        let gc = cx.tape.sigmoid(gc)?;
        Ok(FsaBranches {
            h: cx.tape.broadcast_to(gh, &shape)?,
            w: cx.tape.broadcast_to(gw, &shape)?,
            c: cx.tape.broadcast_to(gc, &shape)?,
        })
    }

    /// Per-pixel importance map `A`, shape equal to the input.
    pub fn attention_map(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        let b = self.branches(cx, x)?;
        Ok(cx.tape.mean_of(&[b.h, b.w, b.c])?)
    }

    pub fn forward(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_map(cx, x)?.0)
    }

    /// Output and the map that produced it.
    pub fn forward_with_map(&self, cx: &mut Cx<'_, '_>, x: Var) -> Result<(Var, Var)> {
        let a = self.attention_map(cx, x)?;
        Ok((cx.tape.mul(x, a)?, a))
    }
}
