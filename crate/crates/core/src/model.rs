//! Backbone → FPN+PAN neck (optionally FSA-gated) → detection heads.

use fsayolo_tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

use crate::config::{ModelConfig, LEVEL_STRIDES};
use crate::error::Result;
use crate::fsa::FsaModule;
use crate::nn::{ConvBlock, CspStage, Cx, Mode, ParamBuilder, Sppf};

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBlock,
    /// Per level: stride-2 downsampling conv, then a CSP stage.
    pub stages: Vec<(ConvBlock, CspStage)>,
    pub sppf: Sppf,
}

/// Neck over the head levels, shallowest first.
#[derive(Clone, Debug)]
pub struct Neck {
    /// `lateral[l]` reduces the deeper map before it is upsampled into level `l`.
    pub lateral: Vec<ConvBlock>,
    pub top_down: Vec<CspStage>,
    /// `down[l - 1]` takes level `l - 1` to level `l`.
    pub down: Vec<ConvBlock>,
    pub bottom_up: Vec<CspStage>,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub neck: Neck,
    /// One module per head level when enabled.
    pub fsa: Vec<FsaModule>,
    pub heads: Vec<Head>,
}

/// Raw head maps `(B, 3·(5+nc), S/stride, S/stride)` in stride order, plus the
/// FSA maps that gated each level (empty without FSA).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub heads: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Same as [`ForwardOutput`] with values detached from any tape.
#[derive(Clone, Debug)]
pub struct Inference {
    pub heads: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

impl Model {
    /// Builds and initializes the network. Shared parts draw their initial
    /// values in the same order regardless of `use_fsa`, so ablation pairs
    /// start from identical backbone, neck and head weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let w = config.width_per_stage.clone();
        let d = &config.depth_per_stage;

        let stem = ConvBlock::new(&mut pb, "backbone.stem", 3, w[0], 3, 2);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let name = format!("backbone.stage{}", s + 1);
            let down = ConvBlock::new(&mut pb, &format!("{name}.down"), w[s], w[s + 1], 3, 2);
            let csp = if s == 3 && config.use_mhsa {
                CspStage::with_attention(&mut pb, &format!("{name}.csp"), w[s + 1], w[s + 1], config.mhsa_heads)?
            } else {
                CspStage::new(&mut pb, &format!("{name}.csp"), w[s + 1], w[s + 1], d[s], true)
            };
            stages.push((down, csp));
        }
        let sppf = Sppf::new(&mut pb, "backbone.sppf", w[4], w[4]);

        let ch: Vec<usize> = config.strides.iter().map(|&s| config.level_width(s)).collect();
        let levels = ch.len();
        let mut lateral = Vec::new();
        let mut top_down = Vec::new();
        let mut x = ch[levels - 1];
        for l in (0..levels - 1).rev() {
            let s = config.strides[l];
            lateral.push(ConvBlock::new(&mut pb, &format!("neck.lateral_p{}", log2(s)), x, ch[l], 1, 1));
            top_down.push(CspStage::new(&mut pb, &format!("neck.top_down_p{}", log2(s)), 2 * ch[l], ch[l], config.neck_depth, false));
            x = ch[l];
        }
        lateral.reverse();
        top_down.reverse();
        let mut down = Vec::new();
        let mut bottom_up = Vec::new();
        for l in 1..levels {
            let s = config.strides[l];
            down.push(ConvBlock::new(&mut pb, &format!("neck.down_p{}", log2(s)), ch[l - 1], ch[l - 1], 3, 2));
            bottom_up.push(CspStage::new(&mut pb, &format!("neck.bottom_up_p{}", log2(s)), 2 * ch[l - 1], ch[l], config.neck_depth, false));
        }

        let no = config.head_channels();
        let heads = config
            .strides
            .iter()
            .zip(&ch)
            .map(|(&s, &c)| Head {
                weight: pb.kaiming(&format!("head.p{}.weight", log2(s)), &[no, c, 1, 1]),
                bias: pb.filled(&format!("head.p{}.bias", log2(s)), &[no], ParamKind::Bias, 0.0),
                stride: s,
            })
            .collect();

        let mut fsa = Vec::new();
        if config.use_fsa {
            for (&s, &c) in config.strides.iter().zip(&ch) {
                fsa.push(FsaModule::new(&mut pb, &format!("neck.fsa_p{}", log2(s)), c, config.fsa_r, config.fsa_k)?);
            }
        }

        Ok(Self {
            config,
            store,
            backbone: Backbone { stem, stages, sppf },
            neck: Neck {
                lateral,
                top_down,
                down,
                bottom_up,
            },
            fsa,
            heads,
        })
    }

    pub fn anchors(&self, head: usize) -> &[(f32, f32); 3] {
        &self.config.anchors[head]
    }

    /// Records the full network on `cx.tape`, which must borrow `self.store`.
    pub fn forward(&self, cx: &mut Cx<'_, '_>, images: Var) -> Result<ForwardOutput> {
        let s = self.config.input_size;
        let shape = cx.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(fsayolo_tensor::TensorError::Shape {
                op: "model",
                msg: format!("expected (B,3,{s},{s}) images, got {shape:?}"),
            }
            .into());
        }

        let bb = &self.backbone;
        let mut x = cx.timed("stem", |cx| bb.stem.forward(cx, images))?;
        let mut feats = Vec::with_capacity(4);
        for (i, (down, csp)) in bb.stages.iter().enumerate() {
            let section = ["stage_p2", "stage_p3", "stage_p4", "stage_p5"][i];
            x = cx.timed(section, |cx| {
                let y = down.forward(cx, x)?;
                csp.forward(cx, y)
            })?;
            feats.push(x);
        }
        let top = cx.timed("sppf", |cx| bb.sppf.forward(cx, x))?;

        let first = LEVEL_STRIDES.len() - self.config.num_heads();
        let feats = &feats[first..];
        let levels = feats.len();
        let neck = &self.neck;
        let outs = cx.timed("neck", |cx| {
            let mut lat = vec![None; levels];
            let mut outs = vec![top; levels];
            let mut x = top;
            for l in (0..levels - 1).rev() {
                let reduced = neck.lateral[l].forward(cx, x)?;
                lat[l + 1] = Some(reduced);
                let up = cx.tape.upsample_nearest(reduced)?;
                let cat = cx.tape.concat(&[up, feats[l]], 1)?;
                x = neck.top_down[l].forward(cx, cat)?;
            }
            outs[0] = x;
            for l in 1..levels {
                let d = neck.down[l - 1].forward(cx, outs[l - 1])?;
                let lateral = lat[l].expect("set in top-down pass");
                let cat = cx.tape.concat(&[d, lateral], 1)?;
                outs[l] = neck.bottom_up[l - 1].forward(cx, cat)?;
            }
            Ok(outs)
        })?;

        let mut attention = Vec::new();
        let gated = if self.fsa.is_empty() {
            outs
        } else {
            cx.timed("fsa", |cx| {
                let mut gated = Vec::with_capacity(levels);
                for (m, &o) in self.fsa.iter().zip(&outs) {
                    let (y, a) = m.forward_with_map(cx, o)?;
                    gated.push(y);
                    attention.push(a);
                }
                Ok(gated)
            })?
        };

        let heads = cx.timed("heads", |cx| {
            self.heads
                .iter()
                .zip(&gated)
                .map(|(h, &f)| {
                    let (w, b) = (cx.param(h.weight)?, cx.param(h.bias)?);
                    Ok(cx.tape.conv2d(f, w, Some(b), 1, 0)?)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(ForwardOutput { heads, attention })
    }

    /// Inference-mode forward on a fresh no-grad tape.
    pub fn infer(&self, images: &Tensor) -> Result<Inference> {
        let mut tape = Tape::with_params(&self.store).no_grad();
        let x = tape.constant(images.clone())?;
        let mut cx = Cx::new(&mut tape, Mode::Eval);
        let out = self.forward(&mut cx, x)?;
        let take = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(Inference {
            heads: take(&out.heads),
            attention: take(&out.attention),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.iter().filter(|(_, p)| p.kind.is_trainable()).map(|(_, p)| p.value.numel()).sum()
    }
}

fn log2(stride: usize) -> u32 {
    stride.trailing_zeros()
}
