//! Precision, recall and COCO-style average precision.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::postprocess::{decode_all, iou, nms, rank, BBox, DetBox};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const EVAL_CONF_THRESHOLD: f32 = 0.001;
/// Operating point of the reported precision and recall.
pub const PR_CONF_THRESHOLD: f32 = 0.25;
/// Images per forward pass during evaluation. Fixed so that results do not
/// depend on the thread count.
const EVAL_CHUNK: usize = 8;

/// Marks each prediction true or false positive.
///
/// `preds` must already be in descending confidence order. Each prediction
/// takes the unmatched gt of its class with the highest IoU, if that IoU is at
/// least `iou_threshold`; earlier (lower-index) gts win IoU ties.
pub fn match_predictions(preds: &[DetBox], gts: &[(usize, BBox)], iou_threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (class, g)) in gts.iter().enumerate() {
                if used[j] || *class != p.class_id {
                    continue;
                }
                let v = iou(&p.bbox, g);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP of confidence-ordered TP/FP flags.
///
/// NaN when there is nothing to measure (no gts and no predictions); 0 when
/// there are predictions but no gts.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if flags.is_empty() { f64::NAN } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope, right to left
    let mut env = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        env[i] = best;
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while k < points.len() && points[k].0 < r - 1e-12 {
            k += 1;
        }
        if k < points.len() {
            sum += env[k];
        }
    }
    sum / 101.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub num_gt: usize,
    /// Mean over classes with ground truth, at confidence ≥ `conf_threshold`
    /// and IoU 0.5.
    pub precision: f64,
    pub recall: f64,
    /// `ap[class][t]` at `IOU_THRESHOLDS[t]`; NaN where undefined.
    pub ap: Vec<[f64; 10]>,
    pub map50: f64,
    pub map5095: f64,
    /// Operating point of precision and recall; AP always sweeps from 0.001.
    pub conf_threshold: f32,
    pub nms_threshold: f32,
}

fn nan_mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v.filter(|x| !x.is_nan()) {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub const CSV_HEADER: &str = "images,objects,precision,recall,map50,map50_95,conf,nms";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.num_images, self.num_gt, self.precision, self.recall, self.map50, self.map5095, self.conf_threshold, self.nms_threshold
        )
    }

    /// `key = value` lines including per-class AP.
    pub fn to_kv(&self, class_names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# precision/recall at conf >= {}, nms {}, iou 0.5", self.conf_threshold, self.nms_threshold);
        let _ = writeln!(s, "images = {}", self.num_images);
        let _ = writeln!(s, "objects = {}", self.num_gt);
        let _ = writeln!(s, "precision = {:.6}", self.precision);
        let _ = writeln!(s, "recall = {:.6}", self.recall);
        let _ = writeln!(s, "map50 = {:.6}", self.map50);
        let _ = writeln!(s, "map50_95 = {:.6}", self.map5095);
        for (c, ap) in self.ap.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = writeln!(s, "ap50.{name} = {:.6}", ap[0]);
            let _ = writeln!(s, "ap50_95.{name} = {:.6}", ap.iter().sum::<f64>() / ap.len() as f64);
        }
        s
    }

    /// The four headline columns as percentages.
    pub fn table_row(&self) -> String {
        format!(
            "Precision (%) & Recall (%) & map@0.5 (%) & map@0.5:0.95 (%)\n{:.2} & {:.2} & {:.2} & {:.2}",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.map50,
            100.0 * self.map5095
        )
    }
}

/// Scores post-NMS detections against pixel-space ground truth.
pub fn evaluate_detections(
    detections: &[Vec<DetBox>],
    ground_truth: &[Vec<(usize, BBox)>],
    num_classes: usize,
    pr_conf: f32,
    nms_threshold: f32,
) -> Result<EvalReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Contract(format!("{} detection lists for {} images", detections.len(), ground_truth.len())));
    }
    if detections.is_empty() {
        return Err(Error::Contract("evaluation needs at least one image".into()));
    }
    let mut ap = vec![[f64::NAN; 10]; num_classes];
    let (mut precisions, mut recalls) = (Vec::new(), Vec::new());
    for (class, ap_c) in ap.iter_mut().enumerate() {
        let num_gt: usize = ground_truth.iter().map(|g| g.iter().filter(|(c, _)| *c == class).count()).sum();
        // (confidence, image, rank within image) for global ordering
        let mut order: Vec<(f32, usize, usize)> = Vec::new();
        let per_image: Vec<Vec<DetBox>> = detections
            .iter()
            .map(|d| {
                let mine: Vec<DetBox> = d.iter().filter(|b| b.class_id == class).cloned().collect();
                rank(&mine).into_iter().map(|i| mine[i].clone()).collect()
            })
            .collect();
        for (img, d) in per_image.iter().enumerate() {
            order.extend(d.iter().enumerate().map(|(r, b)| (b.confidence, img, r)));
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            let flags_per_image: Vec<Vec<bool>> = per_image
                .iter()
                .zip(ground_truth)
                .map(|(d, g)| match_predictions(d, g, thr))
                .collect();
            let flags: Vec<bool> = order.iter().map(|&(_, img, r)| flags_per_image[img][r]).collect();
            ap_c[t] = average_precision(&flags, num_gt);
            if t == 0 && num_gt > 0 {
                let op: Vec<bool> = order
                    .iter()
                    .filter(|o| o.0 >= pr_conf)
                    .map(|&(_, img, r)| flags_per_image[img][r])
                    .collect();
                let tp = op.iter().filter(|&&f| f).count() as f64;
                precisions.push(if op.is_empty() { 0.0 } else { tp / op.len() as f64 });
                recalls.push(tp / num_gt as f64);
            }
        }
    }
    let map50 = nan_mean(ap.iter().map(|a| a[0]));
    // a class's AP is NaN at every threshold or at none
    let map5095 = nan_mean(ap.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64));
    Ok(EvalReport {
        num_images: detections.len(),
        num_gt: ground_truth.iter().map(Vec::len).sum(),
        precision: nan_mean(precisions.into_iter()),
        recall: nan_mean(recalls.into_iter()),
        ap,
        map50,
        map5095,
        conf_threshold: pr_conf,
        nms_threshold,
    })
}

pub fn pixel_ground_truth(labels: &[GroundTruth], size: usize) -> Vec<(usize, BBox)> {
    labels.iter().map(|g| (g.class_id, g.pixel_box(size))).collect()
}

/// Post-NMS detections for every image, computed in fixed-size chunks that
/// may run in parallel.
pub fn detect_all(model: &Model, data: &Dataset, conf_threshold: f32, nms_threshold: f32) -> Result<Vec<Vec<DetBox>>> {
    let chunks: Vec<Vec<usize>> = (0..data.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let per_chunk = chunks
        .par_iter()
        .map(|idx| {
            let (images, _) = data.batch(idx)?;
            let out = model.infer(&images)?;
            (0..idx.len())
                .map(|b| Ok(nms(&decode_all(&out.heads, b, &model.config, conf_threshold)?, nms_threshold)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Forward → decode (conf ≥ 0.001) → NMS → scoring over a dataset, with
/// precision and recall taken at `pr_conf`.
pub fn evaluate(model: &Model, data: &Dataset, pr_conf: f32, nms_threshold: f32) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let dets = detect_all(model, data, EVAL_CONF_THRESHOLD, nms_threshold)?;
    let gts: Vec<_> = data
        .samples
        .iter()
        .map(|s| pixel_ground_truth(&s.labels, model.config.input_size))
        .collect();
    evaluate_detections(&dets, &gts, model.config.num_classes, pr_conf, nms_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, conf: f32, class_id: usize) -> DetBox {
        let mut scores = vec![0.0; class_id + 1];
        scores[class_id] = conf;
        DetBox::new(b, 1.0 - f32::EPSILON / 2.0, scores)
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false, false], 2), 0.0);
        assert!((average_precision(&[true, false, true], 2) - 0.8333).abs() < 0.01);
        assert!(average_precision(&[], 0).is_nan());
        assert_eq!(average_precision(&[false], 0), 0.0);
    }

    #[test]
    fn single_use_of_ground_truth() {
        let g = BBox::new(10.0, 10.0, 4.0, 4.0);
        let flags = match_predictions(&[det(g, 0.9, 0), det(g, 0.8, 0)], &[(0, g)], 0.5);
        assert_eq!(flags, [true, false]);
        assert_eq!(match_predictions(&[det(g, 0.9, 1)], &[(0, g)], 0.5), [false]);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![
            vec![(0, BBox::new(10.0, 10.0, 4.0, 6.0)), (1, BBox::new(30.0, 20.0, 8.0, 8.0))],
            vec![(1, BBox::new(5.0, 40.0, 3.0, 3.0))],
        ];
        let dets: Vec<Vec<DetBox>> = gts.iter().map(|g| g.iter().map(|&(c, b)| det(b, 0.9, c)).collect()).collect();
        let r = evaluate_detections(&dets, &gts, 2, 0.25, 0.45).unwrap();
        assert_eq!((r.precision, r.recall, r.map50, r.map5095), (1.0, 1.0, 1.0, 1.0));
        assert!(r.csv_row().starts_with("2,3,1.000000,1.000000,1.000000,1.000000,"));
    }

    #[test]
    fn no_predictions_zero_recall() {
        let gts = vec![vec![(0, BBox::new(10.0, 10.0, 4.0, 6.0))]];
        let r = evaluate_detections(&[vec![]], &gts, 1, 0.25, 0.45).unwrap();
        assert_eq!((r.recall, r.precision, r.map50), (0.0, 0.0, 0.0));
        assert!(evaluate_detections(&[], &[], 1, 0.25, 0.45).is_err());
    }
}
