//! SGD training with linear warmup and cosine decay.

use std::f64::consts::PI;
use std::time::Instant;

use fsayolo_tensor::{ParamId, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{compute_loss, LossHyper, LossReport};
use crate::metrics::{evaluate, EvalReport, PR_CONF_THRESHOLD};
use crate::model::Model;
use crate::nn::{Cx, Mode};
use crate::postprocess::DEFAULT_NMS_THRESHOLD;

/// Every training knob in one place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lrf: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_interval: usize,
    pub loss: LossHyper,
}

impl Hyper {
    pub fn for_heads(num_heads: usize) -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            lr0: 0.2,
            lrf: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            warmup_epochs: 3.0,
            grad_clip: Some(10.0),
            seed: 0,
            eval_interval: 0,
            loss: LossHyper::for_heads(num_heads),
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::for_heads(model.config.num_heads())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", format!("{} is not a finite nonnegative rate", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("{} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Cosine factor from 1 at epoch 0 down to `lrf` at the last epoch.
    pub fn cosine(&self, epoch: f64) -> f64 {
        let e = self.epochs.max(1) as f64;
        ((1.0 - (epoch * PI / e).cos()) / 2.0) * (self.lrf - 1.0) + 1.0
    }

    /// Learning rate for optimizer step `step` of `steps_per_epoch`.
    pub fn learning_rate(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let epoch = step / steps_per_epoch.max(1);
        let base = self.lr0 * self.cosine(epoch as f64);
        let warmup = (self.warmup_epochs * steps_per_epoch as f64).round().max(0.0);
        if (step as f64) < warmup {
            base * step as f64 / warmup
        } else {
            base
        }
    }
}

/// Nesterov SGD with decoupled momentum buffers per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model.store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// `g ← g + λ·p` (weights only), `v ← μ·v + g`, `p ← p − lr·(g + μ·v)`.
    pub fn step(&mut self, model: &mut Model, grads: Vec<(ParamId, Vec<f32>)>, lr: f64) {
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for (id, mut g) in grads {
            let decays = model.store.get(id).kind.decays();
            let p = model.store.value_mut(id).data_mut();
            let v = &mut self.velocity[id.index()];
            if decays {
                let wd = self.weight_decay as f32;
                g.iter_mut().zip(p.iter()).for_each(|(g, p)| *g += wd * p);
            }
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = mu * *v + g;
                *p -= lr * (g + mu * *v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossReport,
    pub metrics: Option<EvalMetrics>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
}

impl From<&EvalReport> for EvalMetrics {
    fn from(r: &EvalReport) -> Self {
        Self {
            precision: r.precision,
            recall: r.recall,
            map50: r.map50,
            map5095: r.map5095,
        }
    }
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_json_lines(&self) -> String {
        self.epochs.iter().map(|e| e.to_json_line() + "\n").collect()
    }
}

/// One optimizer step on the given batch; returns its loss.
pub fn train_step(model: &mut Model, opt: &mut Sgd, data: &Dataset, batch: &[usize], hyper: &Hyper, lr: f64) -> Result<LossReport> {
    let (images, targets) = data.batch(batch)?;
    let (report, mut grads, updates) = {
        let mut tape = Tape::with_params(&model.store);
        let x = tape.constant(images)?;
        let mut cx = Cx::new(&mut tape, Mode::Train);
        let out = model.forward(&mut cx, x)?;
        let updates = cx.take_norm_updates();
        let (loss, report) = compute_loss(&mut tape, &out.heads, &targets, &model.config, &hyper.loss)?;
        tape.backward(loss)?;
        (report, tape.take_param_grads(), updates)
    };
    if let Some(cap) = hyper.grad_clip {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        if norm > cap {
            let k = (cap / norm) as f32;
            grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= k));
        }
    }
    opt.step(model, grads, lr);
    for u in &updates {
        u.apply(&mut model.store);
    }
    Ok(report)
}

/// Trains `model` on `data`, evaluating on `eval` when scheduled. `on_epoch`
/// sees each record as soon as it is complete.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    hyper: &Hyper,
    eval: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    if hyper.loss.balance.len() != model.config.num_heads() {
        return Err(Error::config("balance", format!("{} weights for {} heads", hyper.loss.balance.len(), model.config.num_heads())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = Sgd::new(model, hyper.momentum, hyper.weight_decay);
    let steps_per_epoch = data.len().div_ceil(hyper.batch_size);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        let mut lr = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            lr = hyper.learning_rate(step, steps_per_epoch);
            let r = train_step(model, &mut opt, data, batch, hyper, lr)?;
            log.step_losses.push(r.total);
            sum.box_loss += r.box_loss;
            sum.obj_loss += r.obj_loss;
            sum.cls_loss += r.cls_loss;
            sum.total += r.total;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let loss = LossReport {
            box_loss: sum.box_loss / n,
            obj_loss: sum.obj_loss / n,
            cls_loss: sum.cls_loss / n,
            total: sum.total / n,
        };
        let due = hyper.eval_interval > 0 && ((epoch + 1) % hyper.eval_interval == 0 || epoch + 1 == hyper.epochs);
        let metrics = match (eval, due) {
            (Some(ev), true) => Some(EvalMetrics::from(&evaluate(model, ev, PR_CONF_THRESHOLD, DEFAULT_NMS_THRESHOLD)?)),
            _ => None,
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss,
            metrics,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let h = Hyper { epochs: 10, ..Hyper::for_heads(4) };
        assert_eq!(h.learning_rate(0, 4), 0.0);
        assert!((h.learning_rate(6, 4) - h.lr0 * h.cosine(1.0) * 0.5).abs() < 1e-12);
        assert!((h.learning_rate(12, 4) - h.lr0 * h.cosine(3.0)).abs() < 1e-12);
        assert!((h.cosine(10.0) - h.lrf).abs() < 1e-12);
        assert!(h.learning_rate(36, 4) < h.learning_rate(20, 4));
    }
}
