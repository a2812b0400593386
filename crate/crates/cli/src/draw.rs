use fsayolo::data::RgbImage;
use fsayolo::postprocess::DetBox;

const PALETTE: [[u8; 3]; 6] = [[255, 56, 56], [56, 200, 255], [255, 210, 40], [120, 255, 90], [200, 80, 255], [255, 140, 20]];

/// Copy of `img` with a 1 px outline per detection, colored by class.
pub fn annotate(img: &RgbImage, dets: &[DetBox]) -> RgbImage {
    let mut out = img.clone();
    let clamp = |v: f32, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    for d in dets {
        let c = PALETTE[d.class_id % PALETTE.len()];
        let (x0, y0) = (clamp(d.bbox.cx - d.bbox.w / 2.0, img.width), clamp(d.bbox.cy - d.bbox.h / 2.0, img.height));
        let (x1, y1) = (clamp(d.bbox.cx + d.bbox.w / 2.0, img.width), clamp(d.bbox.cy + d.bbox.h / 2.0, img.height));
        for x in x0..=x1 {
            out.put(x, y0, c);
            out.put(x, y1, c);
        }
        for y in y0..=y1 {
            out.put(x0, y, c);
            out.put(x1, y, c);
        }
    }
    out
}

/// Maps values in [0, 1] to 0..=255, ties to even, so 0.5 lands on 128.
pub fn gray_levels(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8).collect()
}
