//! Synthetic indoor-device scenes and YOLO-format dataset IO.
//!
//! Layout on disk: `images/<stem>.ppm` (binary P6), `labels/<stem>.txt` with
//! one `class cx cy w h` line per object in normalized coordinates, and
//! `classes.txt` with one class name per line.

use std::fs;
use std::path::{Path, PathBuf};

use fsayolo_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{parse_bool, parse_kv, parse_num};
use crate::error::{Error, Result};
use crate::postprocess::BBox;

pub const CLASS_NAMES: [&str; 3] = ["speaker", "hub", "camera"];

/// One labeled object; `bbox` is normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

impl GroundTruth {
    pub fn to_line(&self) -> String {
        let b = &self.bbox;
        format!("{} {:.6} {:.6} {:.6} {:.6}", self.class_id, b.cx, b.cy, b.w, b.h)
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(format!("expected 5 fields `class cx cy w h`, got {}", fields.len()));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| format!("class id `{}` is not a nonnegative integer", fields[0]))?;
        let mut v = [0f32; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| format!("`{f}` is not a number"))?;
            if !slot.is_finite() {
                return Err(format!("`{f}` is not finite"));
            }
        }
        let [cx, cy, w, h] = v;
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(format!("size {w}x{h} outside (0, 1]"));
        }
        if !((0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy)) {
            return Err(format!("center ({cx}, {cy}) outside [0, 1]"));
        }
        Ok(Self {
            class_id,
            bbox: BBox::new(cx, cy, w, h),
        })
    }

    /// The value a label takes after a write/read cycle.
    pub fn quantized(&self) -> Self {
        Self::parse_line(&self.to_line()).expect("formatted label parses")
    }

    pub fn pixel_box(&self, size: usize) -> BBox {
        self.bbox.scaled(size as f32)
    }
}

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// `(3, H, W)` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f32 / 255.0
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if tokens[0] != "P6" {
            return Err(format!("unsupported magic `{}`, expected P6", tokens[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
        let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
        if maxval != 255 {
            return Err(format!("only 8-bit images are supported, maxval {maxval}"));
        }
        let body = &bytes[(pos + 1).min(bytes.len())..];
        let n = width * height * 3;
        if body.len() < n {
            return Err(format!("pixel data truncated: {} of {n} bytes", body.len()));
        }
        Ok(Self {
            width,
            height,
            data: body[..n].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes).map_err(|msg| Error::Data {
            file: path.to_path_buf(),
            line: 0,
            msg,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// `(max − min) / max` over the RGB channels; 0 for black.
pub fn saturation(c: [u8; 3]) -> f32 {
    let max = *c.iter().max().unwrap() as f32;
    let min = *c.iter().min().unwrap() as f32;
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Pixels above this saturation belong to devices; backgrounds stay below.
pub const DEVICE_SATURATION: f32 = 0.45;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_count: usize,
    pub max_count: usize,
    /// Longer device side as a fraction of the image side.
    pub min_scale: f32,
    pub max_scale: f32,
    pub tiny_min: f32,
    pub tiny_max: f32,
    /// Share of objects per image drawn from the tiny tier (rounded up).
    pub tiny_fraction: f32,
    /// Expected clutter shapes per 10⁴ pixels.
    pub clutter: f32,
    /// Brightness varies by up to ± this fraction.
    pub lighting: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 160,
            min_count: 2,
            max_count: 5,
            min_scale: 0.1,
            max_scale: 0.35,
            tiny_min: 0.02,
            tiny_max: 0.06,
            tiny_fraction: 0.25,
            clutter: 3.0,
            lighting: 0.25,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(f, m));
        if self.image_size < 16 {
            return err("image_size", format!("{} is too small", self.image_size));
        }
        if self.min_count == 0 || self.min_count > self.max_count {
            return err("min_count", format!("count range {}..={} is empty or zero", self.min_count, self.max_count));
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 0.5) {
            return err("min_scale", format!("scale range {}..{} must lie in (0, 0.5]", self.min_scale, self.max_scale));
        }
        if !(0.0 < self.tiny_min && self.tiny_min <= self.tiny_max && self.tiny_max <= self.max_scale) {
            return err("tiny_min", format!("tiny range {}..{} invalid", self.tiny_min, self.tiny_max));
        }
        if !(0.2..=1.0).contains(&self.tiny_fraction) {
            return err("tiny_fraction", format!("{} must lie in [0.2, 1]", self.tiny_fraction));
        }
        if !(self.clutter >= 0.0 && (0.0..0.6).contains(&self.lighting)) {
            return err("lighting", "clutter must be ≥ 0 and lighting in [0, 0.6)".to_string());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "image_size = {}\nmin_count = {}\nmax_count = {}\nmin_scale = {}\nmax_scale = {}\ntiny_min = {}\ntiny_max = {}\ntiny_fraction = {}\nclutter = {}\nlighting = {}\nseed = {}\n",
            self.image_size,
            self.min_count,
            self.max_count,
            self.min_scale,
            self.max_scale,
            self.tiny_min,
            self.tiny_max,
            self.tiny_fraction,
            self.clutter,
            self.lighting,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in &parse_kv(text)? {
            match k.as_str() {
                "image_size" => s.image_size = parse_num(k, v)?,
                "min_count" => s.min_count = parse_num(k, v)?,
                "max_count" => s.max_count = parse_num(k, v)?,
                "min_scale" => s.min_scale = parse_num(k, v)?,
                "max_scale" => s.max_scale = parse_num(k, v)?,
                "tiny_min" => s.tiny_min = parse_num(k, v)?,
                "tiny_max" => s.tiny_max = parse_num(k, v)?,
                "tiny_fraction" => s.tiny_fraction = parse_num(k, v)?,
                "tiny_only" => {
                    if parse_bool(k, v)? {
                        s.tiny_fraction = 1.0;
                    }
                }
                "clutter" => s.clutter = parse_num(k, v)?,
                "lighting" => s.lighting = parse_num(k, v)?,
                "seed" => s.seed = parse_num(k, v)?,
                other => return Err(Error::config(other, "unknown key")),
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Number of tiny objects in an image holding `count` objects.
    pub fn tiny_count(&self, count: usize) -> usize {
        ((count as f32 * self.tiny_fraction).ceil() as usize).min(count)
    }
}

#[derive(Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn separated(&self, o: &Rect, gap: usize) -> bool {
        self.x + self.w + gap <= o.x || o.x + o.w + gap <= self.x || self.y + self.h + gap <= o.y || o.y + o.h + gap <= self.y
    }
}

/// Gap in pixels kept between devices so that they segment apart.
const DEVICE_GAP: usize = 3;

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn scale_rgb(c: [f32; 3], k: f32) -> [u8; 3] {
    c.map(|v| clamp_u8(v * k))
}

/// Renders scene `index` of the set described by `spec`. Labels come back
/// already quantized to their on-disk precision.
pub fn render_scene(spec: &SceneSpec, index: usize) -> (RgbImage, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.image_size;
    let sf = s as f32;

    // wall above a floor line, both low-saturation tints
    let tint = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| {
        let base = rng.random_range(lo..hi);
        [0, 1, 2].map(|_| base * rng.random_range(0.9..1.0))
    };
    let wall = tint(&mut rng, 120.0, 210.0);
    let floor = tint(&mut rng, 60.0, 140.0);
    let horizon = rng.random_range(0.55..0.8) * sf;
    let light = 1.0 + rng.random_range(-spec.lighting..=spec.lighting);
    let grad = rng.random_range(-spec.lighting..=spec.lighting) / sf;
    let lx = rng.random_range(0.0..sf);
    let brightness = |x: usize| light + grad * (x as f32 - lx);

    let mut img = RgbImage::new(s, s);
    for y in 0..s {
        for x in 0..s {
            let base = if (y as f32) < horizon { wall } else { floor };
            img.put(x, y, scale_rgb(base, brightness(x)));
        }
    }
    let clutter = (spec.clutter * (s * s) as f32 / 1e4).round() as usize;
    for _ in 0..clutter {
        let (w, h) = (rng.random_range(2..s / 4), rng.random_range(2..s / 4));
        let (x0, y0) = (rng.random_range(0..s - w), rng.random_range(0..s - h));
        let c = tint(&mut rng, 30.0, 230.0);
        let round = rng.random_bool(0.5);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if !round || in_ellipse(x, y, &Rect { x: x0, y: y0, w, h }) {
                    img.put(x, y, scale_rgb(c, brightness(x)));
                }
            }
        }
    }
    // grayscale sensor noise
    for y in 0..s {
        for x in 0..s {
            let n: f32 = rng.random_range(-6.0..6.0);
            let c = img.get(x, y);
            img.put(x, y, c.map(|v| clamp_u8(v as f32 + n)));
        }
    }

    let count = rng.random_range(spec.min_count..=spec.max_count);
    let tiny = spec.tiny_count(count);
    let mut placed: Vec<Rect> = Vec::new();
    let mut labels = Vec::new();
    for k in 0..count {
        let (lo, hi) = if k < tiny { (spec.tiny_min, spec.tiny_max) } else { (spec.min_scale, spec.max_scale) };
        let class_id = rng.random_range(0..CLASS_NAMES.len());
        let aspect = match class_id {
            0 => rng.random_range(0.55..0.85),
            1 => rng.random_range(0.85..1.15),
            _ => rng.random_range(1.2..1.7),
        };
        let mut side = rng.random_range(lo..=hi) * sf;
        let rect = loop {
            let long = side.max(3.0);
            let (w, h) = if aspect >= 1.0 { (long, long / aspect) } else { (long * aspect, long) };
            let (w, h) = ((w.round() as usize).max(3), (h.round() as usize).max(3));
            let mut found = None;
            for _ in 0..200 {
                let r = Rect {
                    x: rng.random_range(1..s - w),
                    y: rng.random_range(1..s - h),
                    w,
                    h,
                };
                if placed.iter().all(|p| p.separated(&r, DEVICE_GAP)) {
                    found = Some(r);
                    break;
                }
            }
            match found {
                Some(r) => break r,
                None => side *= 0.8,
            }
        };
        draw_device(&mut img, &rect, class_id, &mut rng, &brightness);
        placed.push(rect);
        labels.push(
            GroundTruth {
                class_id,
                bbox: BBox::new(
                    (rect.x as f32 + rect.w as f32 / 2.0) / sf,
                    (rect.y as f32 + rect.h as f32 / 2.0) / sf,
                    rect.w as f32 / sf,
                    rect.h as f32 / sf,
                ),
            }
            .quantized(),
        );
    }
    (img, labels)
}

fn in_ellipse(x: usize, y: usize, r: &Rect) -> bool {
    let (a, b) = (r.w as f32 / 2.0, r.h as f32 / 2.0);
    let dx = (x as f32 + 0.5 - (r.x as f32 + a)) / a;
    let dy = (y as f32 + 0.5 - (r.y as f32 + b)) / b;
    dx * dx + dy * dy <= 1.0
}

fn draw_device(img: &mut RgbImage, r: &Rect, class_id: usize, rng: &mut ChaCha8Rng, brightness: &dyn Fn(usize) -> f32) {
    let jitter = |rng: &mut ChaCha8Rng, c: [f32; 3]| c.map(|v| (v * rng.random_range(0.85..1.15)).min(255.0));
    let body = jitter(
        rng,
        match class_id {
            0 => [205.0, 35.0, 30.0],
            1 => [40.0, 190.0, 50.0],
            _ => [35.0, 70.0, 215.0],
        },
    );
    let stripe = body.map(|v| v * 0.6);
    let (cx, cy) = (r.x as f32 + r.w as f32 / 2.0, r.y as f32 + r.h as f32 / 2.0);
    let lens = r.w.min(r.h) as f32 / 4.0;
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            let k = brightness(x);
            let c = match class_id {
                0 => {
                    let inner = y > r.y && y + 1 < r.y + r.h && r.h >= 6;
                    if inner && (y - r.y).is_multiple_of(3) {
                        stripe
                    } else {
                        body
                    }
                }
                1 => {
                    if !in_ellipse(x, y, r) {
                        continue;
                    }
                    body
                }
                _ => {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    if r.w.min(r.h) >= 6 && dx * dx + dy * dy <= lens * lens {
                        img.put(x, y, [clamp_u8(240.0 * k); 3]);
                        continue;
                    }
                    body
                }
            };
            img.put(x, y, scale_rgb(c, k));
        }
    }
}

fn stem(i: usize) -> String {
    format!("scene_{i:05}")
}

/// Writes `n` scenes plus `classes.txt` under `out`.
pub fn generate(spec: &SceneSpec, n: usize, out: &Path) -> Result<()> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("n", "must generate at least one image"));
    }
    let (images, labels) = (out.join("images"), out.join("labels"));
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let classes = out.join("classes.txt");
    fs::write(&classes, CLASS_NAMES.join("\n") + "\n").map_err(|e| Error::io(&classes, e))?;
    (0..n).into_par_iter().try_for_each(|i| {
        let (img, gts) = render_scene(spec, i);
        img.write(&images.join(format!("{}.ppm", stem(i))))?;
        let text: String = gts.iter().map(|g| g.to_line() + "\n").collect();
        let path = labels.join(format!("{}.txt", stem(i)));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    })
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<GroundTruth>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the given samples into a `(B, 3, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<Vec<GroundTruth>>)> {
        let first = self
            .samples
            .get(*indices.first().ok_or_else(|| Error::Contract("empty batch".into()))?)
            .ok_or_else(|| Error::Contract("batch index out of range".into()))?;
        let shape = first.image.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * first.image.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::Contract(format!("batch index {i} out of range")))?;
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Contract(format!("{} is {:?}, batch expects {shape:?}", s.name, s.image.shape())));
            }
            data.extend_from_slice(s.image.data());
            labels.push(s.labels.clone());
        }
        let t = Tensor::new(&[indices.len(), shape[0], shape[1], shape[2]], data)?;
        Ok((t, labels))
    }

    pub fn num_objects(&self) -> usize {
        self.samples.iter().map(|s| s.labels.len()).sum()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a label file; errors carry the file and 1-based line.
pub fn parse_labels(text: &str, file: &Path, num_classes: Option<usize>) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |msg: String| Error::Data {
            file: file.to_path_buf(),
            line: i + 1,
            msg,
        };
        let gt = GroundTruth::parse_line(line).map_err(data_err)?;
        if let Some(nc) = num_classes {
            if gt.class_id >= nc {
                return Err(data_err(format!("class {} but only {nc} classes listed", gt.class_id)));
            }
        }
        out.push(gt);
    }
    Ok(out)
}

/// Loads `images/*.ppm` paired with `labels/<stem>.txt` (missing label file
/// means no objects). A directory without `images/` is an empty dataset.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let classes_path = dir.join("classes.txt");
    let classes: Vec<String> = if classes_path.exists() {
        read_text(&classes_path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    } else {
        Vec::new()
    };
    let nc = (!classes.is_empty()).then_some(classes.len());
    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Ok(Dataset { classes, samples: Vec::new() });
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    let samples = paths
        .par_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let image = RgbImage::read(p)?.to_tensor();
            let label_path = dir.join("labels").join(format!("{name}.txt"));
            let labels = if label_path.exists() {
                parse_labels(&read_text(&label_path)?, &label_path, nc)?
            } else {
                Vec::new()
            };
            Ok(Sample { name, image, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { classes, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_line_format() {
        let g = GroundTruth::parse_line("0 0.5 0.5 0.25 0.25").unwrap();
        assert_eq!(g, GroundTruth { class_id: 0, bbox: BBox::new(0.5, 0.5, 0.25, 0.25) });
        assert_eq!(g.to_line(), "0 0.500000 0.500000 0.250000 0.250000");
        for bad in ["0 0.5 0.5 0.25", "x 0.5 0.5 0.2 0.2", "0 0.5 0.5 0 0.2", "0 1.5 0.5 0.2 0.2", "0 0.5 0.5 0.2 nan"] {
            assert!(GroundTruth::parse_line(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn ppm_round_trip_and_truncation() {
        let (img, _) = render_scene(&SceneSpec::default(), 3);
        let bytes = img.encode_ppm();
        assert_eq!(RgbImage::decode_ppm(&bytes).unwrap(), img);
        assert!(RgbImage::decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(RgbImage::decode_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn tiny_quota_rounds_up() {
        let s = SceneSpec::default();
        assert_eq!(s.tiny_count(1), 1);
        assert_eq!(s.tiny_count(4), 1);
        assert_eq!(s.tiny_count(5), 2);
    }

    #[test]
    fn spec_text_round_trip() {
        let s = SceneSpec { seed: 9, tiny_fraction: 0.5, ..SceneSpec::default() };
        assert_eq!(SceneSpec::from_text(&s.to_text()).unwrap(), s);
        assert!(SceneSpec::from_text("tiny_fraction = 0.1").is_err());
    }

    #[test]
    fn malformed_label_reports_line() {
        let err = parse_labels("0 0.5 0.5 0.1 0.1\n\n7 0.5 0.5 0.1 0.1\n", Path::new("a.txt"), Some(3)).unwrap_err();
        assert!(matches!(err, Error::Data { line: 3, .. }), "{err}");
    }
}
