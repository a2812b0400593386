//! Anchor fitting: k-means over label sizes with `1 − IoU` as the distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Anchor, ANCHORS_PER_HEAD};
use crate::data::GroundTruth;
use crate::error::{Error, Result};

/// IoU of two boxes sharing a corner, i.e. compared by size only.
pub fn size_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn nearest(p: (f64, f64), centers: &[(f64, f64)]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, 1.0 - size_iou(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// `k` cluster centers over `(w, h)` sizes, sorted by area. Seeded k-means++
/// initialization, then Lloyd iterations with mean updates until the
/// assignment stops changing or `max_iters` is reached.
pub fn kmeans(sizes: &[(f64, f64)], k: usize, seed: u64, max_iters: usize) -> Result<Vec<(f64, f64)>> {
    if k == 0 || sizes.len() < k {
        return Err(Error::Contract(format!("k-means needs at least {k} boxes, got {}", sizes.len())));
    }
    if let Some(bad) = sizes.iter().find(|s| !(s.0 > 0.0 && s.1 > 0.0)) {
        return Err(Error::Contract(format!("box size {bad:?} is not positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![sizes[rng.random_range(0..sizes.len())]];
    while centers.len() < k {
        let d: Vec<f64> = sizes.iter().map(|&p| nearest(p, &centers).1.powi(2)).collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..sizes.len())
        } else {
            let mut u = rng.random::<f64>() * total;
            d.iter().position(|&x| {
                u -= x;
                u < 0.0
            })
            .unwrap_or(sizes.len() - 1)
        };
        centers.push(sizes[next]);
    }
    let mut assign = vec![usize::MAX; sizes.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (a, &p) in assign.iter_mut().zip(sizes) {
            let (c, _) = nearest(p, &centers);
            changed |= *a != c;
            *a = c;
        }
        if !changed {
            break;
        }
        for (ci, c) in centers.iter_mut().enumerate() {
            let members: Vec<_> = sizes.iter().zip(&assign).filter(|(_, &a)| a == ci).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *c = (members.iter().map(|p| p.0).sum::<f64>() / n, members.iter().map(|p| p.1).sum::<f64>() / n);
            }
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(centers)
}

/// Mean best-anchor IoU over the sizes (higher is better).
pub fn mean_best_iou(sizes: &[(f64, f64)], anchors: &[(f64, f64)]) -> f64 {
    sizes.iter().map(|&p| 1.0 - nearest(p, anchors).1).sum::<f64>() / sizes.len().max(1) as f64
}

/// Fits `3 · num_heads` anchors to the labels' pixel sizes and deals them
/// out to heads smallest first, rounded to whole pixels.
pub fn fit(labels: &[Vec<GroundTruth>], image_size: usize, num_heads: usize, seed: u64) -> Result<Vec<[Anchor; ANCHORS_PER_HEAD]>> {
    let s = image_size as f64;
    let sizes: Vec<(f64, f64)> = labels.iter().flatten().map(|g| (g.bbox.w as f64 * s, g.bbox.h as f64 * s)).collect();
    let centers = kmeans(&sizes, ANCHORS_PER_HEAD * num_heads, seed, 300)?;
    Ok(centers
        .chunks(ANCHORS_PER_HEAD)
        .map(|c| {
            let r = |p: (f64, f64)| (p.0.round().max(1.0) as f32, p.1.round().max(1.0) as f32);
            [r(c[0]), r(c[1]), r(c[2])]
        })
        .collect())
}
