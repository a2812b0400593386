//! Central finite-difference verification of analytic gradients.
//!
//! The function under test may return any tensor; it is reduced to a scalar by
//! a fixed random projection `L = Σ rᵢ·yᵢ`. Numeric derivatives evaluate that
//! projection in `f64` on the `f32` outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f32,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max_rel_err={:.3e} over {} entries (worst {})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.checked,
            self.worst
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks gradients with respect to every input and every trainable entry of `store`.
pub fn check_gradients<F>(
    name: &str,
    store: &mut ParamStore,
    inputs: &[Tensor],
    f: F,
    cfg: GradCheck,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    // analytic pass
    let (projection, input_grads, param_grads) = {
        let mut tape = Tape::with_params(store);
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shape = tape.shape(y).to_vec();
        let r = Tensor::from_fn(&shape, |_| rng.random_range(-1.0f32..1.0));
        let rv = tape.constant(r.clone())?;
        let prod = tape.mul(y, rv)?;
        let loss = tape.sum_all(prod)?;
        tape.backward(loss)?;
        let ig: Vec<Vec<f32>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
            .collect();
        let pg: Vec<Option<Vec<f32>>> = store
            .iter()
            .map(|(id, p)| {
                p.kind.is_trainable().then(|| {
                    tape.param_grad(id)
                        .map_or_else(|| vec![0.0; p.value.numel()], <[f32]>::to_vec)
                })
            })
            .collect();
        (r, ig, pg)
    };

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::with_params(store).no_grad();
        let vars = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&mut tape, &vars)?;
        Ok(tape
            .value(y)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let h = cfg.step;
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: String::from("-"),
        checked: 0,
        tolerance: cfg.tolerance,
    };
    let note = |report: &mut GradCheckReport, what: String, a: f32, n: f64| {
        let e = relative_error(a as f64, n);
        report.checked += 1;
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = format!("{what}: analytic {a:.6e} numeric {n:.6e}");
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, grads) in input_grads.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[ii].data()[j];
            work[ii].data_mut()[j] = orig + h;
            let plus = eval(store, &work)?;
            work[ii].data_mut()[j] = orig - h;
            let minus = eval(store, &work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h as f64);
            note(&mut report, format!("input{ii}[{j}]"), a, numeric);
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, grads) in ids.into_iter().zip(param_grads) {
        let Some(grads) = grads else { continue };
        for (j, &a) in grads.iter().enumerate() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store, inputs)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store, inputs)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h as f64);
            let pname = store.get(id).name.clone();
            note(&mut report, format!("{pname}[{j}]"), a, numeric);
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Shuffled values on a 0.05 grid: max-style ops keep their winners under a
/// 1e-3 perturbation.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = crate::tensor::numel(shape);
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_parts(shape.to_vec(), vals)
}

/// Finite-difference check of every differentiable tensor op on small random
/// inputs (extents at most 6).
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    use crate::ops::{Axis, PoolMode};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheck {
        seed,
        ..GradCheck::default()
    };
    let mut empty = ParamStore::new();
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>| -> Result<()> {
        out.push(check_gradients(name, &mut empty, &inputs, f, cfg)?);
        Ok(())
    };

    let s4 = [2, 3, 4, 5];
    run("add", vec![uniform(&mut rng, &s4, -1.0, 1.0), uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| t.add(v[0], v[1]))?;
    run("mul", vec![uniform(&mut rng, &s4, -1.0, 1.0), uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| t.mul(v[0], v[1]))?;
    run("scale", vec![uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| t.scale(v[0], -1.7))?;
    run("sigmoid", vec![uniform(&mut rng, &s4, -4.0, 4.0)], &|t, v| t.sigmoid(v[0]))?;
    run("silu", vec![uniform(&mut rng, &s4, -4.0, 4.0)], &|t, v| t.silu(v[0]))?;
    run("exp", vec![uniform(&mut rng, &s4, -2.0, 1.0)], &|t, v| t.exp(v[0]))?;
    run(
        "mean_of",
        (0..3).map(|_| uniform(&mut rng, &s4, -1.0, 1.0)).collect(),
        &|t, v| t.mean_of(v),
    )?;
    run(
        "channel_affine",
        vec![uniform(&mut rng, &s4, -1.0, 1.0), uniform(&mut rng, &[3], 0.5, 1.5), uniform(&mut rng, &[3], -1.0, 1.0)],
        &|t, v| t.channel_affine(v[0], v[1], v[2]),
    )?;
    run(
        "conv2d 3x3 s1 p1 +bias",
        vec![uniform(&mut rng, &[2, 3, 5, 6], -1.0, 1.0), uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5), uniform(&mut rng, &[4], -1.0, 1.0)],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )?;
    run(
        "conv2d 3x3 s2 p1",
        vec![uniform(&mut rng, &[1, 2, 6, 5], -1.0, 1.0), uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5)],
        &|t, v| t.conv2d(v[0], v[1], None, 2, 1),
    )?;
    run(
        "conv2d 1x1",
        vec![uniform(&mut rng, &[2, 4, 3, 3], -1.0, 1.0), uniform(&mut rng, &[5, 4, 1, 1], -0.5, 0.5), uniform(&mut rng, &[5], -1.0, 1.0)],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
    )?;
    run(
        "conv2d 5x3 s1 p2",
        vec![uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0), uniform(&mut rng, &[2, 2, 5, 3], -0.5, 0.5)],
        &|t, v| t.conv2d(v[0], v[1], None, 1, 2),
    )?;
    for axis in [Axis::C, Axis::H, Axis::W] {
        run(&format!("pool_axis mean {axis:?}"), vec![uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| {
            t.pool_axis(v[0], axis, PoolMode::Mean)
        })?;
        run(&format!("pool_axis max {axis:?}"), vec![spaced(&mut rng, &s4)], &|t, v| {
            t.pool_axis(v[0], axis, PoolMode::Max)
        })?;
    }
    run("broadcast_to", vec![uniform(&mut rng, &[2, 3, 1, 5], -1.0, 1.0)], &|t, v| {
        t.broadcast_to(v[0], &[2, 3, 4, 5])
    })?;
    run(
        "concat",
        vec![uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)],
        &|t, v| t.concat(&[v[0], v[1]], 1),
    )?;
    run("slice", vec![uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| t.slice(v[0], 3, 1, 3))?;
    run("upsample_nearest", vec![uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)], &|t, v| t.upsample_nearest(v[0]))?;
    run(
        "matmul",
        vec![uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 2], -1.0, 1.0)],
        &|t, v| t.matmul(v[0], v[1]),
    )?;
    run(
        "matmul batched",
        vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0), uniform(&mut rng, &[2, 4, 5], -1.0, 1.0)],
        &|t, v| t.matmul(v[0], v[1]),
    )?;
    for axis in [0, 2] {
        run(&format!("softmax axis {axis}"), vec![uniform(&mut rng, &[3, 4, 5], -2.0, 2.0)], &|t, v| {
            t.softmax(v[0], axis)
        })?;
    }
    run("mean_all", vec![uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| t.mean_all(v[0]))?;
    run("sum_all", vec![uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| t.sum_all(v[0]))?;
    run("reshape", vec![uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| t.reshape(v[0], &[6, 20]))?;
    run("permute", vec![uniform(&mut rng, &s4, -1.0, 1.0)], &|t, v| t.permute(v[0], &[0, 2, 3, 1]))?;
    run("max_pool2d k5", vec![spaced(&mut rng, &[1, 2, 6, 6])], &|t, v| t.max_pool2d(v[0], 5))?;
    run(
        "batch_norm",
        vec![uniform(&mut rng, &[3, 2, 4, 4], -2.0, 2.0), uniform(&mut rng, &[2], 0.5, 1.5), uniform(&mut rng, &[2], -1.0, 1.0)],
        &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-3)?.0),
    )?;
    Ok(out)
}
