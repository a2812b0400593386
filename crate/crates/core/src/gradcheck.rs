//! Finite-difference suite over the detector's building blocks and loss,
//! on top of the tensor library's own op suite.

use fsayolo_tensor::gradcheck::{check_gradients, op_suite, GradCheck, GradCheckReport};
use fsayolo_tensor::{ParamStore, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::GroundTruth;
use crate::error::Result;
use crate::fsa::FsaModule;
use crate::loss::{compute_loss, LossHyper};
use crate::nn::{ConvBlock, CspStage, Cx, MhsaBlock, Mode, ParamBuilder, Sppf};
use crate::postprocess::BBox;

fn contract(e: crate::Error) -> TensorError {
    TensorError::Contract(e.to_string())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Overwrites every trainable entry with uniform noise so zero-initialized
/// projections do not hide gradient paths.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, amp: f32) {
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).kind.is_trainable()).collect();
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-amp..amp));
    }
}

fn block<B>(
    name: &str,
    seed: u64,
    input: &[usize],
    build: impl FnOnce(&mut ParamBuilder<'_>) -> Result<B>,
    run: impl Fn(&B, &mut Cx<'_, '_>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = build(&mut ParamBuilder::new(&mut store, seed))?;
    randomize(&mut store, &mut rng, 0.5);
    let x = uniform(&mut rng, input, -1.0, 1.0);
    let cfg = GradCheck { seed, ..GradCheck::default() };
    Ok(check_gradients(
        name,
        &mut store,
        &[x],
        |t, v| {
            let mut cx = Cx::new(t, Mode::Train);
            run(&b, &mut cx, v[0]).map_err(contract)
        },
        cfg,
    )?)
}

/// Reports for the ConvBlock, CSP stages, SPPF, MHSA and the full FSA module.
pub fn module_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        block("conv_block 3x3 s2 +bn+silu", seed, &[2, 3, 6, 6], |pb| Ok(ConvBlock::new(pb, "c", 3, 4, 3, 2)), |b, cx, x| b.forward(cx, x))?,
        block("csp_stage depth 1", seed + 1, &[2, 4, 4, 4], |pb| Ok(CspStage::new(pb, "csp", 4, 4, 1, true)), |b, cx, x| b.forward(cx, x))?,
        block("sppf", seed + 2, &[1, 4, 5, 5], |pb| Ok(Sppf::new(pb, "sppf", 4, 4)), |b, cx, x| b.forward(cx, x))?,
        block("mhsa 2 heads", seed + 3, &[1, 4, 3, 3], |pb| MhsaBlock::new(pb, "attn", 4, 2), |b, cx, x| b.forward(cx, x))?,
        block("csp_stage mhsa", seed + 4, &[1, 4, 3, 3], |pb| CspStage::with_attention(pb, "csp", 4, 4, 2), |b, cx, x| b.forward(cx, x))?,
        block("fsa module r4 k3", seed + 5, &[1, 4, 5, 5], |pb| FsaModule::new(pb, "fsa", 4, 4, 3), |b, cx, x| b.forward(cx, x))?,
        block("fsa module r2 k5", seed + 6, &[2, 6, 4, 5], |pb| FsaModule::new(pb, "fsa", 6, 2, 5), |b, cx, x| b.forward(cx, x))?,
    ])
}

fn loss_case(name: &str, seed: u64, hyper: LossHyper) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Three heads on a 32 px input: grids 4, 2, 1.
    let mut config = ModelConfig::desk_scale(2).without_tiny_head();
    config.input_size = 32;
    config.anchors = vec![
        [(3.0, 4.0), (5.0, 5.0), (6.0, 4.0)],
        [(8.0, 10.0), (12.0, 9.0), (10.0, 14.0)],
        [(18.0, 20.0), (24.0, 16.0), (28.0, 28.0)],
    ];
    let gt = |c, cx: f32, cy: f32, w: f32, h: f32| GroundTruth {
        class_id: c,
        bbox: BBox::new(cx / 32.0, cy / 32.0, w / 32.0, h / 32.0),
    };
    let targets = vec![
        vec![gt(0, 9.3, 14.8, 5.0, 6.0), gt(1, 20.6, 11.2, 11.0, 12.0)],
        vec![gt(1, 15.5, 17.1, 22.0, 19.0)],
    ];
    let inputs: Vec<Tensor> = config
        .strides
        .iter()
        .map(|&s| uniform(&mut rng, &[2, config.head_channels(), 32 / s, 32 / s], -1.5, 1.5))
        .collect();
    let cfg = GradCheck { seed, ..GradCheck::default() };
    Ok(check_gradients(
        name,
        &mut ParamStore::new(),
        &inputs,
        |t, v| compute_loss(t, v, &targets, &config, &hyper).map(|(l, _)| l).map_err(contract),
        cfg,
    )?)
}

/// Each loss term in isolation. The objectness target is held at 1
/// (`iou_ratio = 0`) because the CIoU-derived target is treated as a constant.
pub fn loss_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let base = LossHyper {
        box_gain: 0.0,
        obj_gain: 0.0,
        cls_gain: 0.0,
        iou_ratio: 0.0,
        ..LossHyper::for_heads(3)
    };
    Ok(vec![
        loss_case("loss box (ciou)", seed, LossHyper { box_gain: 1.0, ..base.clone() })?,
        loss_case("loss objectness", seed, LossHyper { obj_gain: 1.0, ..base.clone() })?,
        loss_case("loss class", seed, LossHyper { cls_gain: 1.0, ..base.clone() })?,
        loss_case("loss composite", seed, LossHyper { iou_ratio: 0.0, ..LossHyper::for_heads(3) })?,
    ])
}

/// Tensor ops, network blocks and loss terms.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = op_suite(seed)?;
    out.extend(module_suite(seed)?);
    out.extend(loss_suite(seed)?);
    Ok(out)
}
