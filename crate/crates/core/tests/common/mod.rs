//! Reference implementations used as test oracles. Each is written
//! independently of the library code it checks, favouring brute force.

#![allow(dead_code)]

use fsayolo::config::ModelConfig;
use fsayolo::data::{render_scene, SceneSpec};
use fsayolo::loss::anchor_ratio;
use fsayolo::postprocess::{decode, encode, BBox, DetBox};
use fsayolo_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn det(bbox: BBox, conf: f32, class_id: usize) -> DetBox {
    let mut scores = vec![0.0; class_id + 1];
    scores[class_id] = conf;
    DetBox::new(bbox, 1.0 - f32::EPSILON / 2.0, scores)
}

/// IoU by corner arithmetic in f64.
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let c = |v: &BBox| {
        let (cx, cy, w, h) = (v.cx as f64, v.cy as f64, v.w as f64, v.h as f64);
        (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    };
    let (a, b) = (c(a), c(b));
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    inter / ((a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter)
}

/// Up to eight boxes on a 20 px canvas with two classes and pairwise
/// distinct confidences.
pub fn random_box_set(rng: &mut ChaCha8Rng) -> Vec<DetBox> {
    let n = rng.random_range(1..=8);
    let mut confs: Vec<u32> = (1..20).collect();
    confs.shuffle(rng);
    (0..n)
        .map(|i| {
            let w = rng.random_range(2.0..10.0f32);
            let h = rng.random_range(2.0..10.0f32);
            let b = BBox::new(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), w, h);
            det(b, confs[i] as f32 * 0.05, rng.random_range(0..2))
        })
        .collect()
}

/// Greedy NMS characterized without running the greedy loop: among all
/// `2^n` subsets, the result is the unique `K` such that a box belongs to `K`
/// exactly when no higher-priority member of `K` of its class overlaps it at
/// IoU ≥ `thr`. Returns the indices of `K` in priority order.
pub fn brute_force_nms(boxes: &[DetBox], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .confidence
            .total_cmp(&boxes[i].confidence)
            .then(boxes[i].class_id.cmp(&boxes[j].class_id))
            .then(i.cmp(&j))
    });
    let pos: Vec<usize> = (0..n).map(|i| order.iter().position(|&o| o == i).unwrap()).collect();
    let suppresses = |a: usize, b: usize| {
        pos[a] < pos[b] && boxes[a].class_id == boxes[b].class_id && iou_oracle(&boxes[a].bbox, &boxes[b].bbox) >= thr
    };
    let mut fixed = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask >> i & 1 == 1;
        if (0..n).all(|b| inside(b) == !(0..n).any(|a| inside(a) && suppresses(a, b))) {
            fixed.push(mask);
        }
    }
    assert_eq!(fixed.len(), 1, "greedy NMS fixed point must be unique");
    order.into_iter().filter(|&i| fixed[0] >> i & 1 == 1).collect()
}

/// Exact area under the monotone precision envelope (all-point
/// interpolation), integrating over each recall increment.
pub fn all_point_ap(flags: &[bool], num_gt: usize) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut tp = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        recall.push(tp / num_gt as f64);
        precision.push(tp / (i + 1) as f64);
    }
    let mut area = 0.0;
    for i in 1..recall.len() {
        let envelope = precision[i..].iter().cloned().fold(0.0, f64::max);
        area += (recall[i] - recall[i - 1]) * envelope;
    }
    area
}

/// Greedy matching characterized by exhaustive search over every partial
/// injective assignment: the accepted one gives each prediction, in order,
/// the best-IoU gt (ties to the lower index) among those not taken by
/// earlier predictions, or nothing when none reaches `thr`.
pub fn brute_force_matching(preds: &[DetBox], gts: &[(usize, BBox)], thr: f64) -> Vec<bool> {
    fn search(i: usize, preds: &[DetBox], gts: &[(usize, BBox)], used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == preds.len() {
            out.push(cur.clone());
            return;
        }
        let mut options: Vec<Option<usize>> = vec![None];
        options.extend((0..gts.len()).filter(|&j| !used[j]).map(Some));
        for o in options {
            if let Some(j) = o {
                used[j] = true;
            }
            cur.push(o);
            search(i + 1, preds, gts, used, cur, out);
            cur.pop();
            if let Some(j) = o {
                used[j] = false;
            }
        }
    }
    let mut all = Vec::new();
    search(0, preds, gts, &mut vec![false; gts.len()], &mut Vec::new(), &mut all);
    let valid: Vec<_> = all
        .into_iter()
        .filter(|a| {
            (0..preds.len()).all(|i| {
                let taken: Vec<usize> = a[..i].iter().flatten().copied().collect();
                let mut best: Option<(usize, f64)> = None;
                for (j, (c, g)) in gts.iter().enumerate() {
                    if taken.contains(&j) || *c != preds[i].class_id {
                        continue;
                    }
                    let v = iou_oracle(&preds[i].bbox, g);
                    if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                a[i] == best.map(|(j, _)| j)
            })
        })
        .collect();
    assert_eq!(valid.len(), 1);
    valid[0].iter().map(Option::is_some).collect()
}

/// Scripted reference evaluation: returns `(precision, recall, map50, map50_95)`.
///
/// Detections are pooled per class across images (confidence descending,
/// then image, then within-image priority), matched greedily per image, and
/// scored with 101-point interpolation computed as "max precision at recall
/// ≥ r". Classes without gt are skipped. P/R use detections with
/// confidence ≥ 0.25 at IoU 0.5.
pub fn scripted_eval(dets: &[Vec<DetBox>], gts: &[Vec<(usize, BBox)>], num_classes: usize) -> (f64, f64, f64, f64) {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let (mut ap50, mut ap_all, mut ps, mut rs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for class in 0..num_classes {
        let n_gt = gts.iter().flatten().filter(|(c, _)| *c == class).count();
        if n_gt == 0 {
            continue;
        }
        let mut pooled: Vec<(f32, usize, usize, DetBox)> = Vec::new();
        for (img, d) in dets.iter().enumerate() {
            let mut mine: Vec<DetBox> = d.iter().filter(|b| b.class_id == class).cloned().collect();
            mine.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            pooled.extend(mine.into_iter().enumerate().map(|(r, b)| (b.confidence, img, r, b)));
        }
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut aps = Vec::new();
        for &thr in &thresholds {
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            // matching must follow within-image order, which the pooled order respects
            let flags: Vec<bool> = pooled
                .iter()
                .map(|(_, img, _, b)| {
                    let mut best = None;
                    let mut best_iou = thr;
                    for (j, (c, g)) in gts[*img].iter().enumerate() {
                        let v = iou_oracle(&b.bbox, g);
                        if *c == class && !used[*img][j] && v >= best_iou && (best.is_none() || v > best_iou) {
                            best = Some(j);
                            best_iou = v;
                        }
                    }
                    if let Some(j) = best {
                        used[*img][j] = true;
                    }
                    best.is_some()
                })
                .collect();
            let mut curve = Vec::new();
            let mut tp = 0.0;
            for (i, f) in flags.iter().enumerate() {
                tp += *f as u8 as f64;
                curve.push((tp / n_gt as f64, tp / (i + 1) as f64));
            }
            let ap = (0..=100)
                .map(|k| {
                    let r = k as f64 / 100.0;
                    curve.iter().filter(|(rc, _)| *rc >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 101.0;
            aps.push(ap);
            if thr == 0.5 {
                let op: Vec<bool> = flags.iter().zip(&pooled).filter(|(_, p)| p.0 >= 0.25).map(|(f, _)| *f).collect();
                let tp = op.iter().filter(|&&f| f).count() as f64;
                ps.push(if op.is_empty() { 0.0 } else { tp / op.len() as f64 });
                rs.push(tp / n_gt as f64);
            }
        }
        ap50.push(aps[0]);
        ap_all.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&ps), mean(&rs), mean(&ap50), mean(&ap_all))
}

/// Encodes every generated gt box at each anchor it may be assigned to,
/// writes the offsets into an otherwise silent head and decodes it again.
/// Returns (assignable boxes, boxes recovered within 1e-4 px).
pub fn decode_round_trip(spec_seed: u64, scenes: usize) -> (usize, usize) {
    let config = ModelConfig::default();
    let size = config.input_size;
    let no = config.head_channels() / 3;
    let spec = SceneSpec { seed: spec_seed, ..SceneSpec::default() };
    let (mut valid, mut recovered) = (0, 0);
    for index in 0..scenes {
        for gt in render_scene(&spec, index).1 {
            let b = gt.pixel_box(size);
            for (h, &stride) in config.strides.iter().enumerate() {
                let grid = size / stride;
                let (gx, gy) = ((b.cx as usize / stride).min(grid - 1), (b.cy as usize / stride).min(grid - 1));
                for (a, &anchor) in config.anchors[h].iter().enumerate() {
                    if anchor_ratio(b.w, b.h, anchor) >= 4.0 {
                        continue;
                    }
                    let Some(t) = encode(&b, gx, gy, anchor, stride) else { continue };
                    valid += 1;
                    let mut raw = Tensor::full(&[1, config.head_channels(), grid, grid], -30.0);
                    let at = |c: usize| (a * no + c) * grid * grid + gy * grid + gx;
                    for (c, v) in t.iter().enumerate() {
                        raw.data_mut()[at(c)] = *v;
                    }
                    raw.data_mut()[at(4)] = 30.0;
                    raw.data_mut()[at(5 + gt.class_id)] = 30.0;
                    let dets = decode(&raw, 0, &config.anchors[h], stride, size, 0.5).unwrap();
                    if let [d] = dets.as_slice() {
                        let err = [d.bbox.cx - b.cx, d.bbox.cy - b.cy, d.bbox.w - b.w, d.bbox.h - b.h];
                        if d.class_id == gt.class_id && err.iter().all(|e| e.abs() <= 1e-4) {
                            recovered += 1;
                        }
                    }
                }
            }
        }
    }
        (valid, recovered)
}
