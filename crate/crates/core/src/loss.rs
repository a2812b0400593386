//! Target assignment and the composite box/objectness/class loss.
//!
//! The loss is evaluated in `f64` directly on the raw head tensors together
//! with its gradient, and enters the tape as one precomputed scalar node.

use fsayolo_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ANCHORS_PER_HEAD};
use crate::data::GroundTruth;
use crate::error::{Error, Result};

const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossHyper {
    pub box_gain: f64,
    pub obj_gain: f64,
    pub cls_gain: f64,
    /// Objectness target is `(1 − gr) + gr·IoU`.
    pub iou_ratio: f64,
    pub anchor_threshold: f32,
    /// Per-head objectness weights in stride order.
    pub balance: Vec<f64>,
}

impl LossHyper {
    pub fn for_heads(num_heads: usize) -> Self {
        let balance = match num_heads {
            4 => vec![4.0, 1.0, 0.4, 0.1],
            3 => vec![4.0, 1.0, 0.4],
            n => vec![1.0; n],
        };
        Self {
            box_gain: 0.05,
            obj_gain: 1.0,
            cls_gain: 0.5,
            iou_ratio: 1.0,
            anchor_threshold: 4.0,
            balance,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Σ over heads of mean `1 − CIoU` over matches.
    pub box_loss: f64,
    /// Σ over heads of balance-weighted mean objectness BCE.
    pub obj_loss: f64,
    /// Σ over heads of mean class BCE over matches.
    pub cls_loss: f64,
    pub total: f64,
}

/// One positive sample: anchor `anchor` of cell `(gx, gy)` in image `image`
/// predicts ground truth `gt` of that image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Match {
    pub image: usize,
    pub gt: usize,
    pub anchor: usize,
    pub gx: usize,
    pub gy: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetAssignment {
    /// Matches per head, in stride order.
    pub heads: Vec<Vec<Match>>,
}

/// Width/height ratio test between a box and an anchor.
pub fn anchor_ratio(w: f32, h: f32, anchor: (f32, f32)) -> f32 {
    let rw = w / anchor.0;
    let rh = h / anchor.1;
    rw.max(1.0 / rw).max(rh).max(1.0 / rh)
}

/// Assigns each ground truth to every anchor whose side ratios are all below
/// the threshold, in its own cell plus the two neighbouring cells nearer the
/// center (fractional offset strictly below 0.5).
pub fn assign_targets(targets: &[Vec<GroundTruth>], config: &ModelConfig, anchor_threshold: f32) -> TargetAssignment {
    let s = config.input_size as f32;
    let heads = config
        .strides
        .iter()
        .zip(&config.anchors)
        .map(|(&stride, anchors)| {
            let grid = config.grid_size(stride);
            let gf = grid as f32;
            let mut out = Vec::new();
            for (image, gts) in targets.iter().enumerate() {
                for (gi, gt) in gts.iter().enumerate() {
                    let (w, h) = (gt.bbox.w * s, gt.bbox.h * s);
                    let (x, y) = (gt.bbox.cx * gf, gt.bbox.cy * gf);
                    let (xi, yi) = (gf - x, gf - y);
                    let mut cells = vec![(0i64, 0i64)];
                    if x.fract() < 0.5 && x > 1.0 {
                        cells.push((-1, 0));
                    }
                    if y.fract() < 0.5 && y > 1.0 {
                        cells.push((0, -1));
                    }
                    if xi.fract() < 0.5 && xi > 1.0 {
                        cells.push((1, 0));
                    }
                    if yi.fract() < 0.5 && yi > 1.0 {
                        cells.push((0, 1));
                    }
                    for (a, &anchor) in anchors.iter().enumerate() {
                        if anchor_ratio(w, h, anchor) >= anchor_threshold {
                            continue;
                        }
                        for &(dx, dy) in &cells {
                            let cx = (x.floor() as i64 + dx).clamp(0, grid as i64 - 1) as usize;
                            let cy = (y.floor() as i64 + dy).clamp(0, grid as i64 - 1) as usize;
                            out.push(Match {
                                image,
                                gt: gi,
                                anchor: a,
                                gx: cx,
                                gy: cy,
                            });
                        }
                    }
                }
            }
            out
        })
        .collect();
    TargetAssignment { heads }
}

/// `max(x, 0) − x·t + ln(1 + e^{−|x|})`.
pub fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value with partial derivatives with respect to four inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    pub fn variable(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    pub fn sigmoid(self) -> Self {
        let s = sigmoid(self.v);
        self.map(s, s * (1.0 - s))
    }

    pub fn sqr(self) -> Self {
        self.map(self.v * self.v, 2.0 * self.v)
    }

    pub fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    pub fn max(self, o: Self) -> Self {
        if o.v > self.v {
            o
        } else {
            self
        }
    }

    pub fn min(self, o: Self) -> Self {
        if o.v < self.v {
            o
        } else {
            self
        }
    }

    pub fn clamp_min(self, lo: f64) -> Self {
        if self.v < lo {
            Self::constant(lo)
        } else {
            self
        }
    }
}

impl std::ops::Add for Dual4 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl std::ops::Sub for Dual4 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl std::ops::Mul for Dual4 {
    type Output = Self;
    // product rule
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl std::ops::Div for Dual4 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        Self {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv),
        }
    }
}

impl std::ops::Mul<f64> for Dual4 {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.map(self.v * c, c)
    }
}

/// Complete IoU of two center-size boxes, returned with the plain IoU.
///
/// `CIoU = IoU − ρ²/c² − α·v`, `v = 4/π²·(atan(w₂/h₂) − atan(w₁/h₁))²`,
/// `α = v / (v − IoU + 1)`.
pub fn ciou(a: [Dual4; 4], b: [Dual4; 4]) -> (Dual4, f64) {
    let half = |x: Dual4| x * 0.5;
    let [x1, y1, w1, h1] = a;
    let [x2, y2, w2, h2] = b;
    let (ax1, ax2, ay1, ay2) = (x1 - half(w1), x1 + half(w1), y1 - half(h1), y1 + half(h1));
    let (bx1, bx2, by1, by2) = (x2 - half(w2), x2 + half(w2), y2 - half(h2), y2 + half(h2));
    let (w1, h1) = (ax2 - ax1, (ay2 - ay1).clamp_min(EPS));
    let (w2, h2) = (bx2 - bx1, (by2 - by1).clamp_min(EPS));
    let iw = (ax2.min(bx2) - ax1.max(bx1)).clamp_min(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).clamp_min(0.0);
    let inter = iw * ih;
    let union = w1 * h1 + w2 * h2 - inter + Dual4::constant(EPS);
    let iou = inter / union;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let chh = ay2.max(by2) - ay1.min(by1);
    let c2 = cw.sqr() + chh.sqr() + Dual4::constant(EPS);
    let rho2 = ((bx1 + bx2 - ax1 - ax2).sqr() + (by1 + by2 - ay1 - ay2).sqr()) * 0.25;
    let v = ((w2 / h2).atan() - (w1 / h1).atan()).sqr() * (4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let alpha = v / (v - iou + Dual4::constant(1.0 + EPS));
    (iou - (rho2 / c2 + v * alpha), iou.v)
}

/// Loss value, per-component report and gradient with respect to every head map.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub report: LossReport,
    pub grads: Vec<Vec<f32>>,
}

/// Evaluates the loss and its gradient on raw head maps.
pub fn loss_and_grads(
    heads: &[&Tensor],
    targets: &[Vec<GroundTruth>],
    config: &ModelConfig,
    hyper: &LossHyper,
) -> Result<LossOutput> {
    if heads.len() != config.num_heads() || hyper.balance.len() != heads.len() {
        return Err(Error::Contract(format!(
            "{} head maps, {} heads configured, {} balance weights",
            heads.len(),
            config.num_heads(),
            hyper.balance.len()
        )));
    }
    let no = config.head_channels();
    let per = no / ANCHORS_PER_HEAD;
    let nc = config.num_classes;
    for (i, h) in heads.iter().enumerate() {
        let g = config.grid_size(config.strides[i]);
        let want = [targets.len(), no, g, g];
        if h.shape() != want {
            return Err(fsayolo_tensor::TensorError::Shape {
                op: "loss",
                msg: format!("head {i} is {:?}, expected {want:?}", h.shape()),
            }
            .into());
        }
    }
    for (img, gts) in targets.iter().enumerate() {
        if let Some(bad) = gts.iter().find(|g| g.class_id >= nc) {
            return Err(Error::Contract(format!("image {img}: class {} with {nc} classes", bad.class_id)));
        }
    }

    let assignment = assign_targets(targets, config, hyper.anchor_threshold);
    let s = config.input_size as f64;
    let mut report = LossReport::default();
    let mut grads = Vec::with_capacity(heads.len());
    for (i, head) in heads.iter().enumerate() {
        let stride = config.strides[i];
        let grid = config.grid_size(stride);
        let plane = grid * grid;
        let data = head.data();
        let at = |m: &Match, j: usize| (m.image * no + m.anchor * per + j) * plane + m.gy * grid + m.gx;
        let mut g = vec![0.0f64; data.len()];
        let mut tobj = vec![0.0f64; targets.len() * ANCHORS_PER_HEAD * plane];
        let matches = &assignment.heads[i];

        if !matches.is_empty() {
            let n = matches.len() as f64;
            let (mut lbox, mut lcls) = (0.0, 0.0);
            for m in matches {
                let gt = &targets[m.image][m.gt];
                let (aw, ah) = config.anchors[i][m.anchor];
                let gs = grid as f64 / s;
                let t = [
                    Dual4::constant(gt.bbox.cx as f64 * grid as f64 - m.gx as f64),
                    Dual4::constant(gt.bbox.cy as f64 * grid as f64 - m.gy as f64),
                    Dual4::constant(gt.bbox.w as f64 * grid as f64),
                    Dual4::constant(gt.bbox.h as f64 * grid as f64),
                ];
                let logit = |j: usize| Dual4::variable(data[at(m, j)] as f64, j);
                let p = [
                    logit(0).sigmoid() * 2.0 - Dual4::constant(0.5),
                    logit(1).sigmoid() * 2.0 - Dual4::constant(0.5),
                    (logit(2).sigmoid() * 2.0).sqr() * (aw as f64 * gs),
                    (logit(3).sigmoid() * 2.0).sqr() * (ah as f64 * gs),
                ];
                let (c, iou) = ciou(p, t);
                lbox += 1.0 - c.v;
                for j in 0..4 {
                    g[at(m, j)] -= hyper.box_gain * c.d[j] / n;
                }
                let cell = (m.image * ANCHORS_PER_HEAD + m.anchor) * plane + m.gy * grid + m.gx;
                let target = (1.0 - hyper.iou_ratio) + hyper.iou_ratio * c_clamp(iou);
                tobj[cell] = tobj[cell].max(target);
                for k in 0..nc {
                    let x = data[at(m, 5 + k)] as f64;
                    let t = if k == gt.class_id { 1.0 } else { 0.0 };
                    lcls += bce_with_logits(x, t);
                    g[at(m, 5 + k)] += hyper.cls_gain * (sigmoid(x) - t) / (n * nc as f64);
                }
            }
            report.box_loss += lbox / n;
            report.cls_loss += lcls / (n * nc as f64);
        }

        let count = tobj.len() as f64;
        let w = hyper.balance[i];
        let mut lobj = 0.0;
        for (cell, &t) in tobj.iter().enumerate() {
            let (img, rest) = (cell / (ANCHORS_PER_HEAD * plane), cell % (ANCHORS_PER_HEAD * plane));
            let (a, pos) = (rest / plane, rest % plane);
            let idx = (img * no + a * per + 4) * plane + pos;
            let x = data[idx] as f64;
            lobj += bce_with_logits(x, t);
            g[idx] += hyper.obj_gain * w * (sigmoid(x) - t) / count;
        }
        report.obj_loss += w * lobj / count;
        grads.push(g.into_iter().map(|v| v as f32).collect());
    }
    report.total = hyper.box_gain * report.box_loss + hyper.obj_gain * report.obj_loss + hyper.cls_gain * report.cls_loss;
    if ![report.box_loss, report.obj_loss, report.cls_loss, report.total].iter().all(|v| v.is_finite()) {
        return Err(fsayolo_tensor::TensorError::NonFinite { op: "loss" }.into());
    }
    Ok(LossOutput { report, grads })
}

fn c_clamp(iou: f64) -> f64 {
    iou.clamp(0.0, 1.0)
}

/// Records the loss of `heads` on the tape as a single scalar node.
pub fn compute_loss(
    tape: &mut Tape<'_>,
    heads: &[Var],
    targets: &[Vec<GroundTruth>],
    config: &ModelConfig,
    hyper: &LossHyper,
) -> Result<(Var, LossReport)> {
    let out = {
        let maps: Vec<&Tensor> = heads.iter().map(|&v| tape.value(v)).collect();
        loss_and_grads(&maps, targets, config, hyper)?
    };
    let var = tape.precomputed_scalar(heads, out.report.total as f32, out.grads)?;
    Ok((var, out.report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::BBox;

    fn gt(class_id: usize, cx: f32, cy: f32, w: f32, h: f32) -> GroundTruth {
        GroundTruth {
            class_id,
            bbox: BBox::new(cx, cy, w, h),
        }
    }

    fn boxes(v: [f64; 4]) -> [Dual4; 4] {
        v.map(Dual4::constant)
    }

    #[test]
    fn identical_boxes_have_unit_ciou() {
        let (c, iou) = ciou(boxes([3.0, 4.0, 2.0, 5.0]), boxes([3.0, 4.0, 2.0, 5.0]));
        assert!((c.v - 1.0).abs() < 1e-6 && (iou - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ciou_penalizes_offset_and_aspect() {
        let (shifted, iou) = ciou(boxes([3.5, 4.0, 2.0, 2.0]), boxes([3.0, 4.0, 2.0, 2.0]));
        // IoU = 1.5·2 / (8 − 3) = 0.6, ρ² = 0.25, c² = 2.5² + 2² = 10.25
        assert!((iou - 0.6).abs() < 1e-6);
        assert!((shifted.v - (0.6 - 0.25 / 10.25)).abs() < 1e-6);
        let (stretched, _) = ciou(boxes([3.0, 4.0, 4.0, 1.0]), boxes([3.0, 4.0, 2.0, 2.0]));
        let (_, plain) = ciou(boxes([3.0, 4.0, 4.0, 1.0]), boxes([3.0, 4.0, 2.0, 2.0]));
        assert!(stretched.v < plain);
    }

    #[test]
    fn ratio_threshold() {
        assert_eq!(anchor_ratio(10.0, 20.0, (10.0, 20.0)), 1.0);
        assert_eq!(anchor_ratio(40.0, 20.0, (10.0, 20.0)), 4.0);
        assert_eq!(anchor_ratio(2.5, 20.0, (10.0, 20.0)), 4.0);
    }

    #[test]
    fn center_of_cell_matches_only_that_cell() {
        let cfg = ModelConfig::desk_scale(1);
        // stride 8: grid 20, center (10.5, 7.5) in grid units, box equal to anchor (14,16)
        let g = gt(0, 10.5 / 20.0, 7.5 / 20.0, 14.0 / 160.0, 16.0 / 160.0);
        let a = assign_targets(&[vec![g]], &cfg, 4.0);
        let at_p3: Vec<_> = a.heads[1].iter().filter(|m| m.anchor == 0).collect();
        assert_eq!(at_p3.len(), 1);
        assert_eq!((at_p3[0].gx, at_p3[0].gy), (10, 7));
    }

    #[test]
    fn neighbours_follow_the_fractional_offset() {
        let cfg = ModelConfig::desk_scale(1);
        let g = gt(0, 10.25 / 20.0, 7.75 / 20.0, 14.0 / 160.0, 16.0 / 160.0);
        let a = assign_targets(&[vec![g]], &cfg, 4.0);
        let mut cells: Vec<_> = a.heads[1].iter().filter(|m| m.anchor == 0).map(|m| (m.gx, m.gy)).collect();
        cells.sort();
        assert_eq!(cells, [(9, 7), (10, 7), (10, 8)]);
    }

    #[test]
    fn no_targets_and_saturated_logits_give_near_zero_loss() {
        let cfg = ModelConfig::desk_scale(2);
        let heads: Vec<Tensor> = cfg
            .strides
            .iter()
            .map(|&s| Tensor::full(&[1, cfg.head_channels(), cfg.grid_size(s), cfg.grid_size(s)], -20.0))
            .collect();
        let refs: Vec<&Tensor> = heads.iter().collect();
        let out = loss_and_grads(&refs, &[vec![]], &cfg, &LossHyper::for_heads(4)).unwrap();
        assert_eq!(out.report.box_loss, 0.0);
        assert_eq!(out.report.cls_loss, 0.0);
        assert!(out.report.total < 5.5 * 2.1e-9 && out.report.total > 0.0);
    }

    #[test]
    fn bce_is_stable() {
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits(-1e4, 1.0).is_finite());
        assert!((bce_with_logits(1e4, 0.0) - 1e4).abs() < 1e-9);
    }

    #[test]
    fn dual_partials_match_finite_differences() {
        let f = |v: [f64; 4]| {
            let d: [Dual4; 4] = std::array::from_fn(|i| Dual4::variable(v[i], i));
            let p = [d[0].sigmoid(), d[1] * 1.3, (d[2].sigmoid() * 2.0).sqr(), d[3].atan() + Dual4::constant(2.0)];
            ciou(p, boxes([0.6, 1.1, 1.2, 2.2])).0
        };
        let x = [0.3, 0.7, -0.4, 0.9];
        let c = f(x);
        for i in 0..4 {
            let mut hi = x;
            let mut lo = x;
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (f(hi).v - f(lo).v) / 2e-6;
            assert!((fd - c.d[i]).abs() < 1e-6, "{i}: {fd} vs {}", c.d[i]);
        }
    }
}
