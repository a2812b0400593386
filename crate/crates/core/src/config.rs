//! Declarative model description and its `key = value` text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `(width, height)` in pixels.
pub type Anchor = (f32, f32);

pub const ANCHORS_PER_HEAD: usize = 3;
/// Strides of every backbone level a head may attach to, shallowest first.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// YOLOv5 base widths; the desk-scale default applies a 0.25 multiplier.
pub const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];

/// k-means fit (seed 0) to 512 default synthetic scenes, four heads.
pub const DESK_ANCHORS: [[Anchor; ANCHORS_PER_HEAD]; 4] = [
    [(4.0, 4.0), (5.0, 5.0), (6.0, 8.0)],
    [(8.0, 7.0), (14.0, 20.0), (21.0, 16.0)],
    [(22.0, 30.0), (33.0, 24.0), (30.0, 38.0)],
    [(45.0, 33.0), (35.0, 49.0), (49.0, 48.0)],
];

/// The same fit with nine anchors for the model without the stride-4 head.
pub const DESK_ANCHORS_NO_TINY: [[Anchor; ANCHORS_PER_HEAD]; 3] = [
    [(4.0, 4.0), (5.0, 7.0), (8.0, 7.0)],
    [(18.0, 18.0), (32.0, 24.0), (24.0, 33.0)],
    [(44.0, 33.0), (33.0, 45.0), (48.0, 48.0)],
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_classes: usize,
    /// Channels of the stem and of the stride-4/8/16/32 backbone stages.
    pub width_per_stage: Vec<usize>,
    /// Bottleneck counts of the four backbone CSP stages.
    pub depth_per_stage: Vec<usize>,
    pub neck_depth: usize,
    pub use_mhsa: bool,
    pub mhsa_heads: usize,
    pub use_fsa: bool,
    pub fsa_r: usize,
    pub fsa_k: usize,
    /// Head strides; `[4, 8, 16, 32]` with the tiny-object head, `[8, 16, 32]` without.
    pub strides: Vec<usize>,
    /// Three anchors per head, in stride order.
    pub anchors: Vec<[Anchor; ANCHORS_PER_HEAD]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale(3)
    }
}

impl ModelConfig {
    /// Width multiplier 0.25, one bottleneck per stage, 160 px input.
    pub fn desk_scale(num_classes: usize) -> Self {
        Self {
            input_size: 160,
            num_classes,
            width_per_stage: BASE_WIDTHS.iter().map(|w| w / 4).collect(),
            depth_per_stage: vec![1; 4],
            neck_depth: 1,
            use_mhsa: true,
            mhsa_heads: 4,
            use_fsa: true,
            fsa_r: 4,
            fsa_k: 7,
            strides: LEVEL_STRIDES.to_vec(),
            anchors: DESK_ANCHORS.to_vec(),
        }
    }

    /// Same network without the stride-4 head. Default anchors are swapped
    /// for the nine-anchor fit so the small sizes stay covered.
    pub fn without_tiny_head(mut self) -> Self {
        if self.strides.first() == Some(&4) {
            self.strides.remove(0);
            if self.anchors == DESK_ANCHORS {
                self.anchors = DESK_ANCHORS_NO_TINY.to_vec();
            } else {
                self.anchors.remove(0);
            }
        }
        self
    }

    pub fn has_tiny_head(&self) -> bool {
        self.strides.first() == Some(&4)
    }

    pub fn num_heads(&self) -> usize {
        self.strides.len()
    }

    /// Channels per head output: `3 · (5 + classes)`.
    pub fn head_channels(&self) -> usize {
        ANCHORS_PER_HEAD * (5 + self.num_classes)
    }

    /// Backbone width feeding the level with the given stride.
    pub fn level_width(&self, stride: usize) -> usize {
        let level = LEVEL_STRIDES.iter().position(|&s| s == stride).expect("validated stride");
        self.width_per_stage[level + 1]
    }

    pub fn grid_size(&self, stride: usize) -> usize {
        self.input_size / stride
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(f, m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return err("input_size", format!("{} is not a positive multiple of 32", self.input_size));
        }
        if self.num_classes == 0 {
            return err("num_classes", "must be at least 1".into());
        }
        if self.width_per_stage.len() != 5 || self.width_per_stage.iter().any(|&w| w == 0 || w % 2 != 0) {
            return err("width_per_stage", format!("need 5 positive even widths, got {:?}", self.width_per_stage));
        }
        if self.depth_per_stage.len() != 4 {
            return err("depth_per_stage", format!("need 4 depths, got {:?}", self.depth_per_stage));
        }
        if self.strides != LEVEL_STRIDES && self.strides != LEVEL_STRIDES[1..] {
            return err("strides", format!("must be 4,8,16,32 or 8,16,32, got {:?}", self.strides));
        }
        if self.anchors.len() != self.strides.len() {
            return err(
                "anchors",
                format!("{} anchor sets for {} heads", self.anchors.len(), self.strides.len()),
            );
        }
        if self.anchors.iter().flatten().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
            return err("anchors", "every anchor extent must be positive and finite".into());
        }
        if self.use_mhsa {
            let c = self.width_per_stage[4] / 2;
            if self.mhsa_heads == 0 || !c.is_multiple_of(self.mhsa_heads) {
                return err("mhsa_heads", format!("{} does not divide the attention width {c}", self.mhsa_heads));
            }
        }
        if self.use_fsa {
            if self.fsa_k.is_multiple_of(2) {
                return err("fsa_k", format!("{} must be odd", self.fsa_k));
            }
            for &s in &self.strides {
                let c = self.level_width(s);
                if self.fsa_r == 0 || !c.is_multiple_of(self.fsa_r) {
                    return err("fsa_r", format!("{} does not divide width {c} at stride {s}", self.fsa_r));
                }
            }
        }
        Ok(())
    }

    /// Trainable parameter count derived from the architecture arithmetic
    /// alone, without allocating any weights.
    pub fn parameter_count(&self) -> Result<usize> {
        self.validate()?;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + 2 * cout;
        let bottleneck = |c: usize| conv(c, c, 1) + conv(c, c, 3);
        let mhsa = |c: usize| 4 * (c * c + c);
        let csp = |cin: usize, cout: usize, n: usize, attention: bool| {
            let h = cout / 2;
            let inner = if attention { mhsa(h) } else { n * bottleneck(h) };
            2 * conv(cin, h, 1) + inner + conv(2 * h, cout, 1)
        };
        let w = &self.width_per_stage;
        let d = &self.depth_per_stage;

        let mut total = conv(3, w[0], 3);
        for stage in 0..4 {
            total += conv(w[stage], w[stage + 1], 3);
            let attention = stage == 3 && self.use_mhsa;
            total += csp(w[stage + 1], w[stage + 1], d[stage], attention);
        }
        total += conv(w[4], w[4] / 2, 1) + conv(2 * w[4], w[4], 1);

        let ch: Vec<usize> = self.strides.iter().map(|&s| self.level_width(s)).collect();
        let levels = ch.len();
        let mut x = ch[levels - 1];
        for l in (0..levels - 1).rev() {
            total += conv(x, ch[l], 1) + csp(2 * ch[l], ch[l], self.neck_depth, false);
            x = ch[l];
        }
        for l in 1..levels {
            total += conv(ch[l - 1], ch[l - 1], 3) + csp(2 * ch[l - 1], ch[l], self.neck_depth, false);
        }
        if self.use_fsa {
            let (r, k) = (self.fsa_r, self.fsa_k);
            let gate = |c: usize| (c / r) * c + c / r + c * (c / r) + c;
            total += ch.iter().map(|&c| 2 * gate(c) + k * k + 1).sum::<usize>();
        }
        let no = self.head_channels();
        total += ch.iter().map(|&c| c * no + no).sum::<usize>();
        Ok(total)
    }

    /// `key = value` text, one entry per line, lists comma-separated.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let anchors = self
            .anchors
            .iter()
            .flatten()
            .map(|(w, h)| format!("{w},{h}"))
            .collect::<Vec<_>>()
            .join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "width_per_stage = {}", list(&self.width_per_stage));
        let _ = writeln!(s, "depth_per_stage = {}", list(&self.depth_per_stage));
        let _ = writeln!(s, "neck_depth = {}", self.neck_depth);
        let _ = writeln!(s, "use_mhsa = {}", self.use_mhsa);
        let _ = writeln!(s, "mhsa_heads = {}", self.mhsa_heads);
        let _ = writeln!(s, "use_fsa = {}", self.use_fsa);
        let _ = writeln!(s, "fsa_r = {}", self.fsa_r);
        let _ = writeln!(s, "fsa_k = {}", self.fsa_k);
        let _ = writeln!(s, "strides = {}", list(&self.strides));
        let _ = writeln!(s, "anchors = {anchors}");
        s
    }

    /// Parses `key = value` text on top of the desk-scale defaults. Unknown
    /// keys are errors; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let entries = parse_kv(text)?;
        let mut cfg = Self::default();
        let mut anchors_given = false;
        for (key, value) in &entries {
            match key.as_str() {
                "input_size" => cfg.input_size = parse_num(key, value)?,
                "num_classes" => cfg.num_classes = parse_num(key, value)?,
                "width_per_stage" => cfg.width_per_stage = parse_list(key, value)?,
                "depth_per_stage" => cfg.depth_per_stage = parse_list(key, value)?,
                "neck_depth" => cfg.neck_depth = parse_num(key, value)?,
                "use_mhsa" => cfg.use_mhsa = parse_bool(key, value)?,
                "mhsa_heads" => cfg.mhsa_heads = parse_num(key, value)?,
                "use_fsa" => cfg.use_fsa = parse_bool(key, value)?,
                "fsa_r" => cfg.fsa_r = parse_num(key, value)?,
                "fsa_k" => cfg.fsa_k = parse_num(key, value)?,
                "strides" => cfg.strides = parse_list(key, value)?,
                "anchors" => {
                    let flat: Vec<f32> = parse_list(key, value)?;
                    if !flat.len().is_multiple_of(2 * ANCHORS_PER_HEAD) {
                        return Err(Error::config(key, format!("{} numbers do not form 3 (w,h) pairs per head", flat.len())));
                    }
                    cfg.anchors = flat
                        .chunks(2 * ANCHORS_PER_HEAD)
                        .map(|c| [(c[0], c[1]), (c[2], c[3]), (c[4], c[5])])
                        .collect();
                    anchors_given = true;
                }
                other => return Err(Error::config(other, "unknown key")),
            }
        }
        if !anchors_given && cfg.strides.len() == 3 && cfg.anchors.len() == 4 {
            cfg.anchors = DESK_ANCHORS_NO_TINY.to_vec();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")));
        };
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(key, "given twice"));
        }
    }
    Ok(out)
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("`{value}` is not a boolean"))),
    }
}

pub(crate) fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::default();
        cfg.anchors[1][2] = (12.625, 3.5);
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invariant_violations_name_the_field() {
        let bad = |text: &str, field: &str| match ModelConfig::from_text(text) {
            Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
            other => panic!("{text}: {other:?}"),
        };
        bad("input_size = 150", "input_size");
        bad("fsa_r = 5", "fsa_r");
        bad("strides = 4,8,16", "strides");
        bad("anchors = 1,2,3,4,5,6", "anchors");
        bad("anchors = 1,2,3", "anchors");
        bad("colour = blue", "colour");
        bad("use_fsa = maybe", "use_fsa");
        bad("mhsa_heads = 3", "mhsa_heads");
    }

    #[test]
    fn three_head_config_drops_default_tiny_anchors() {
        let cfg = ModelConfig::from_text("strides = 8,16,32\n# no anchors given\n").unwrap();
        assert_eq!(cfg.anchors.len(), 3);
        assert!(!cfg.has_tiny_head());
        assert_eq!(cfg, ModelConfig::default().without_tiny_head());
    }

    #[test]
    fn head_channels_for_one_class() {
        assert_eq!(ModelConfig::desk_scale(1).head_channels(), 18);
    }
}
