use fsayolo::checkpoint;
use fsayolo::fsa::FsaModule;
use fsayolo::model::Model;
use fsayolo::nn::{CspStage, Cx, MhsaBlock, Mode, ParamBuilder, Sppf, SPPF_KERNEL};
use fsayolo::ModelConfig;
use fsayolo_tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Sliding-window max over a (C, H, W) slab, window clipped at the borders.
fn naive_pool(x: &[f32], c: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut m = f32::NEG_INFINITY;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xq) = (y + dy, xx + dx);
                        if yy >= 0 && yy < h as isize && xq >= 0 && xq < w as isize {
                            m = m.max(x[ch * h * w + yy as usize * w + xq as usize]);
                        }
                    }
                }
                out[ch * h * w + y as usize * w + xx as usize] = m;
            }
        }
    }
    out
}

fn sppf_pyramid(input: Tensor, mode: Mode) -> Vec<f32> {
    let mut store = ParamStore::new();
    let sppf = Sppf::new(&mut ParamBuilder::new(&mut store, 2), "sppf", 6, 6);
    let mut tape = Tape::with_params(&store).no_grad();
    let x = tape.constant(input).unwrap();
    let mut cx = Cx::new(&mut tape, mode);
    let p = sppf.pyramid(&mut cx, x).unwrap();
    tape.value(p).data().to_vec()
}

#[test]
fn sppf_pools_match_sliding_window_oracle() {
    let (c, h, w) = (3, 7, 7);
    let plane = c * h * w;
    let cat = sppf_pyramid(uniform(1, &[1, 6, h, w]), Mode::Train);
    assert_eq!(cat.len(), 4 * plane);
    let base = &cat[..plane];
    let p1 = naive_pool(base, c, h, w, SPPF_KERNEL);
    let p2 = naive_pool(&p1, c, h, w, SPPF_KERNEL);
    let p3 = naive_pool(&p2, c, h, w, SPPF_KERNEL);
    assert_eq!(&cat[plane..2 * plane], p1.as_slice());
    assert_eq!(&cat[2 * plane..3 * plane], p2.as_slice());
    assert_eq!(&cat[3 * plane..], p3.as_slice());
}

#[test]
fn successive_sppf_pools_never_decrease_on_a_ramp() {
    let ramp = Tensor::from_fn(&[1, 6, 6, 6], |i| (i % 36) as f32 / 36.0 + (i / 36) as f32 * 0.1);
    let cat = sppf_pyramid(ramp, Mode::Eval);
    let plane = 3 * 36;
    for k in 0..3 {
        for i in 0..plane {
            assert!(cat[(k + 1) * plane + i] >= cat[k * plane + i]);
        }
    }
}

/// Gradients of a random projection of the block output, by parameter name.
fn param_grads(store: &ParamStore, input: Tensor, run: impl Fn(&mut Cx<'_, '_>, fsayolo_tensor::Var) -> fsayolo::Result<fsayolo_tensor::Var>) -> Vec<(String, Vec<f32>)> {
    let mut tape = Tape::with_params(store);
    let x = tape.constant(input).unwrap();
    let y = {
        let mut cx = Cx::new(&mut tape, Mode::Train);
        run(&mut cx, x).unwrap()
    };
    let r = tape.constant(uniform(99, tape.shape(y))).unwrap();
    let prod = tape.mul(y, r).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    tape.backward(loss).unwrap();
    store
        .iter()
        .filter(|(_, p)| p.kind.is_trainable())
        .map(|(id, p)| (p.name.clone(), tape.param_grad(id).map(<[f32]>::to_vec).unwrap_or_default()))
        .collect()
}

#[test]
fn every_csp_and_mhsa_parameter_receives_gradient() {
    let mut store = ParamStore::new();
    let (csp, attn_stage, attn) = {
        let mut pb = ParamBuilder::new(&mut store, 5);
        (
            CspStage::new(&mut pb, "csp", 8, 8, 2, true),
            CspStage::with_attention(&mut pb, "csp_attn", 8, 8, 2).unwrap(),
            MhsaBlock::new(&mut pb, "mhsa", 8, 4).unwrap(),
        )
    };
    let grads = param_grads(&store, uniform(3, &[2, 8, 4, 4]), |cx, x| {
        let a = csp.forward(cx, x)?;
        let b = attn_stage.forward(cx, a)?;
        attn.forward(cx, b)
    });
    assert!(grads.len() > 20);
    for (name, g) in grads {
        assert!(!g.is_empty() && g.iter().all(|v| v.is_finite()), "{name}");
        assert!(g.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

fn small_config(widths: Vec<usize>) -> ModelConfig {
    ModelConfig { width_per_stage: widths, ..ModelConfig::default() }
}

#[test]
fn doubling_widths_increases_enumerated_parameter_count() {
    let mut prev = 0;
    for widths in [vec![4, 8, 8, 16, 16], vec![8, 16, 16, 32, 32], vec![16, 32, 32, 64, 64]] {
        let cfg = small_config(widths);
        let model = Model::new(cfg.clone(), 0).unwrap();
        let enumerated: usize = model.store.iter().filter(|(_, p)| p.kind.is_trainable()).map(|(_, p)| p.value.numel()).sum();
        assert_eq!(enumerated, cfg.parameter_count().unwrap());
        assert_eq!(enumerated, model.parameter_count());
        assert!(enumerated > prev);
        prev = enumerated;
    }
}

#[test]
fn checkpoint_file_round_trip_reproduces_forward_bitwise() {
    let mut cfg = small_config(vec![8, 8, 16, 16, 32]);
    cfg.input_size = 64;
    let mut model = Model::new(cfg, 8).unwrap();
    // make every array distinctive, running statistics included
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let var_like = model.store.get(id).name.ends_with("running_var");
        for v in model.store.value_mut(id).data_mut() {
            *v = if var_like { rng.random_range(0.5..1.5) } else { rng.random_range(-0.3..0.3) };
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let x = uniform(4, &[2, 3, 64, 64]);
    let (a, b) = (model.infer(&x).unwrap(), back.infer(&x).unwrap());
    for (ha, hb) in a.heads.iter().zip(&b.heads) {
        assert!(ha.data().iter().zip(hb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = checkpoint::load(&path).err().unwrap();
    assert!(matches!(err, fsayolo::Error::Checkpoint(_)), "{err}");
}

#[test]
fn stored_hash_is_sha256_of_stored_config_text() {
    use sha2::{Digest, Sha256};
    let model = Model::new(small_config(vec![8, 8, 16, 16, 32]), 0).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let text = &bytes[16..16 + len];
    let digest: [u8; 32] = Sha256::digest(text).into();
    assert_eq!(&bytes[16 + len..16 + len + 32], digest.as_slice());
    assert_eq!(std::str::from_utf8(text).unwrap(), model.config.to_text());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fresh_fsa_halves_any_input(c_mul in 1usize..4, r in prop::sample::select(vec![1usize, 2, 4]), k in prop::sample::select(vec![1usize, 3, 5, 7]), h in 1usize..7, w in 1usize..7, b in 1usize..3, seed in any::<u64>()) {
        let c = c_mul * r;
        let mut store = ParamStore::new();
        let fsa = FsaModule::new(&mut ParamBuilder::new(&mut store, seed), "fsa", c, r, k).unwrap();
        let x = uniform(seed, &[b, c, h, w]);
        let mut tape = Tape::with_params(&store).no_grad();
        let xv = tape.constant(x.clone()).unwrap();
        let mut cx = Cx::new(&mut tape, Mode::Eval);
        let (y, a) = fsa.forward_with_map(&mut cx, xv).unwrap();
        prop_assert_eq!(tape.value(y).shape(), x.shape());
        prop_assert!(tape.value(a).data().iter().all(|&v| v == 0.5));
        for (o, i) in tape.value(y).data().iter().zip(x.data()) {
            prop_assert_eq!(o.to_bits(), (i * 0.5).to_bits());
        }
    }
}
