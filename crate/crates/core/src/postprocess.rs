//! Head decoding, box geometry and non-maximum suppression.

use std::cmp::Ordering;

use fsayolo_tensor::Tensor;

use crate::config::{Anchor, ModelConfig, ANCHORS_PER_HEAD};
use crate::error::{Error, Result};

pub const DEFAULT_CONF_THRESHOLD: f32 = 0.25;
pub const DEFAULT_NMS_THRESHOLD: f32 = 0.45;

/// Axis-aligned box by center and size, in pixels unless stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)` in `f64`.
    pub fn corners(&self) -> [f64; 4] {
        let (cx, cy, hw, hh) = (self.cx as f64, self.cy as f64, self.w as f64 / 2.0, self.h as f64 / 2.0);
        [cx - hw, cy - hh, cx + hw, cy + hh]
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }
}

/// Intersection over union of two boxes with positive extents.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetBox {
    pub bbox: BBox,
    pub objectness: f32,
    pub class_scores: Vec<f32>,
    /// `objectness · max(class_scores)`.
    pub confidence: f32,
    pub class_id: usize,
}

impl DetBox {
    /// Builds a detection from probabilities, deriving class and confidence.
    pub fn new(bbox: BBox, objectness: f32, class_scores: Vec<f32>) -> Self {
        let (class_id, best) = argmax(&class_scores);
        let confidence = open_unit((objectness as f64) * (best as f64));
        Self {
            bbox,
            objectness,
            class_scores,
            confidence,
            class_id,
        }
    }
}

/// First index of the maximum; ties go to the lowest index.
fn argmax(v: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, &s) in v.iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

fn sigmoid64(x: f32) -> f64 {
    let x = x as f64;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rounds into the open interval `(0, 1)` at `f32` precision.
fn open_unit(p: f64) -> f32 {
    (p as f32).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Decodes one head map for image `image` of the batch.
///
/// `cx = (2σ(tx) − 0.5 + gx)·stride`, `w = aw·(2σ(tw))²`; centers are clipped
/// to `[0, image_size]`. Keeps boxes with confidence ≥ `conf_threshold`.
pub fn decode(
    raw: &Tensor,
    image: usize,
    anchors: &[Anchor; ANCHORS_PER_HEAD],
    stride: usize,
    image_size: usize,
    conf_threshold: f32,
) -> Result<Vec<DetBox>> {
    let [b, c, gh, gw] = raw.shape()[..] else {
        return Err(shape("head map must be 4-D", raw.shape()));
    };
    if c % ANCHORS_PER_HEAD != 0 || c / ANCHORS_PER_HEAD < 6 {
        return Err(shape("channel extent is not 3·(5+classes)", raw.shape()));
    }
    if image >= b {
        return Err(Error::Contract(format!("image {image} out of batch {b}")));
    }
    let per = c / ANCHORS_PER_HEAD;
    let nc = per - 5;
    let plane = gh * gw;
    let data = &raw.data()[image * c * plane..(image + 1) * c * plane];
    let s = stride as f64;
    let limit = image_size as f64;
    let mut out = Vec::new();
    for (a, &(aw, ah)) in anchors.iter().enumerate() {
        let at = |j: usize, cell: usize| data[(a * per + j) * plane + cell];
        for gy in 0..gh {
            for gx in 0..gw {
                let cell = gy * gw + gx;
                let obj = sigmoid64(at(4, cell));
                let scores: Vec<f32> = (0..nc).map(|k| open_unit(sigmoid64(at(5 + k, cell)))).collect();
                let best = scores.iter().copied().fold(0.0f32, f32::max) as f64;
                if ((obj * best) as f32) < conf_threshold {
                    continue;
                }
                let cx = ((2.0 * sigmoid64(at(0, cell)) - 0.5 + gx as f64) * s).clamp(0.0, limit);
                let cy = ((2.0 * sigmoid64(at(1, cell)) - 0.5 + gy as f64) * s).clamp(0.0, limit);
                let w = aw as f64 * (2.0 * sigmoid64(at(2, cell))).powi(2);
                let h = ah as f64 * (2.0 * sigmoid64(at(3, cell))).powi(2);
                let bbox = BBox::new(cx as f32, cy as f32, (w as f32).max(f32::MIN_POSITIVE), (h as f32).max(f32::MIN_POSITIVE));
                let det = DetBox::new(bbox, open_unit(obj), scores);
                if det.confidence >= conf_threshold {
                    out.push(det);
                }
            }
        }
    }
    Ok(out)
}

fn shape(msg: &str, got: &[usize]) -> Error {
    fsayolo_tensor::TensorError::Shape {
        op: "decode",
        msg: format!("{msg}, got {got:?}"),
    }
    .into()
}

/// Decodes every head of `config` for one image.
pub fn decode_all(heads: &[Tensor], image: usize, config: &ModelConfig, conf_threshold: f32) -> Result<Vec<DetBox>> {
    if heads.len() != config.num_heads() {
        return Err(Error::Contract(format!("{} head maps for {} heads", heads.len(), config.num_heads())));
    }
    let mut out = Vec::new();
    for (i, raw) in heads.iter().enumerate() {
        let expect = config.head_channels();
        if raw.shape().get(1) != Some(&expect) {
            return Err(shape(&format!("expected {expect} channels"), raw.shape()));
        }
        out.extend(decode(raw, image, &config.anchors[i], config.strides[i], config.input_size, conf_threshold)?);
    }
    Ok(out)
}

/// Box logits `(tx, ty, tw, th)` that decode to `bbox` at cell `(gx, gy)`.
///
/// `None` when the center offset lies outside `(−0.5, 1.5)` cells or a side
/// ratio to the anchor reaches 4, where decoding cannot reach the box.
pub fn encode(bbox: &BBox, gx: usize, gy: usize, anchor: Anchor, stride: usize) -> Option<[f32; 4]> {
    let s = stride as f64;
    let px = (bbox.cx as f64 / s - gx as f64 + 0.5) / 2.0;
    let py = (bbox.cy as f64 / s - gy as f64 + 0.5) / 2.0;
    let pw = (bbox.w as f64 / anchor.0 as f64).sqrt() / 2.0;
    let ph = (bbox.h as f64 / anchor.1 as f64).sqrt() / 2.0;
    let ps = [px, py, pw, ph];
    if ps.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return None;
    }
    Some(ps.map(|p| logit(p) as f32))
}

/// Greedy class-wise NMS.
///
/// Candidates are ranked by confidence (descending), then class id, then input
/// order. A box is kept iff its IoU with every kept box of its class is below
/// `iou_threshold`. The result is in rank order.
pub fn nms(boxes: &[DetBox], iou_threshold: f32) -> Vec<DetBox> {
    let thr = iou_threshold as f64;
    let mut kept: Vec<&DetBox> = Vec::new();
    for i in rank(boxes) {
        let b = &boxes[i];
        if kept.iter().all(|k| k.class_id != b.class_id || iou(&k.bbox, &b.bbox) < thr) {
            kept.push(b);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Indices in NMS priority order.
pub fn rank(boxes: &[DetBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| priority(&boxes[i], &boxes[j]));
    order
}

fn priority(a: &DetBox, b: &DetBox) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(bbox: BBox, conf: f32, class_id: usize) -> DetBox {
        let mut scores = vec![0.1; class_id + 1];
        scores[class_id] = conf;
        DetBox::new(bbox, 1.0 - f32::EPSILON / 2.0, scores)
    }

    #[test]
    fn zero_logits_decode_to_anchor_at_cell_center() {
        let raw = Tensor::zeros(&[1, 18, 6, 5]);
        let anchors = [(10.0, 20.0), (1.0, 1.0), (1.0, 1.0)];
        let dets = decode(&raw, 0, &anchors, 8, 160, 0.0).unwrap();
        assert_eq!(dets.len(), 3 * 30);
        let d = &dets[4 * 5 + 3];
        assert_eq!((d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h), (28.0, 36.0, 10.0, 20.0));
        assert_eq!(d.objectness, 0.5);
        assert_eq!(d.confidence, 0.25);
    }

    #[test]
    fn threshold_one_keeps_nothing() {
        let raw = Tensor::full(&[1, 21, 4, 4], 30.0);
        let dets = decode(&raw, 0, &[(4.0, 4.0); 3], 8, 32, 1.0).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn decode_rejects_bad_channels() {
        let raw = Tensor::zeros(&[1, 17, 2, 2]);
        assert!(decode(&raw, 0, &[(4.0, 4.0); 3], 8, 16, 0.1).is_err());
    }

    #[test]
    fn centers_are_clipped() {
        let raw = Tensor::full(&[1, 18, 2, 2], 40.0);
        let dets = decode(&raw, 0, &[(4.0, 4.0); 3], 16, 32, 0.0).unwrap();
        assert!(dets.iter().all(|d| d.bbox.cx <= 32.0 && d.bbox.cy <= 32.0));
    }

    #[test]
    fn iou_examples() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::from_corners(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn nms_boundary_iou_suppresses() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(0.0, 0.0, 2.0, 1.0);
        assert_eq!(iou(&a, &b), 0.5);
        let kept = nms(&[det(b, 0.8, 0), det(a, 0.9, 0)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox, a);
        let kept = nms(&[det(b, 0.8, 1), det(a, 0.9, 0)], 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(nms(&[det(a, 0.3, 0)], 0.5).len(), 1);
    }

    #[test]
    fn class_ties_break_to_lower_id() {
        let d = DetBox::new(BBox::new(5.0, 5.0, 2.0, 2.0), 0.5, vec![0.4, 0.7, 0.7]);
        assert_eq!(d.class_id, 1);
    }

    #[test]
    fn encode_inverts_decode() {
        let anchors = [(10.0, 14.0), (20.0, 20.0), (30.0, 12.0)];
        let stride = 8;
        let gt = BBox::new(29.3, 33.1, 17.0, 25.5);
        let (gx, gy) = (3, 4);
        let t = encode(&gt, gx, gy, anchors[0], stride).unwrap();
        let mut raw = Tensor::full(&[1, 18, 6, 6], -30.0);
        let cell = gy * 6 + gx;
        for (j, v) in t.iter().enumerate() {
            raw.data_mut()[j * 36 + cell] = *v;
        }
        raw.data_mut()[4 * 36 + cell] = 30.0;
        raw.data_mut()[5 * 36 + cell] = 30.0;
        let dets = decode(&raw, 0, &anchors, stride, 48, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        for (x, y) in [(b.cx, gt.cx), (b.cy, gt.cy), (b.w, gt.w), (b.h, gt.h)] {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
        assert!(encode(&BBox::new(29.3, 33.1, 40.0, 25.5), gx, gy, anchors[0], stride).is_none());
    }
}
