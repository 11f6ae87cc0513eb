//! Heatmap-based prompt generation: ground-truth centroid heatmaps, the
//! heatmap / foreground losses, foreground binarization and peak selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_centroid, rle_encode, BinaryMask, Centroid, ImageSize, PixelPoint};

/// Dense per-pixel map with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    size: ImageSize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(size: ImageSize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size.pixels() {
            return Err(Error::dims(format!(
                "heatmap has {} values, expected {}",
                values.len(),
                size.pixels()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numerical(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self { size, values })
    }

    pub fn zeros(size: ImageSize) -> Self {
        Self {
            size,
            values: vec![0.0; size.pixels()],
        }
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, p: PixelPoint) -> f64 {
        self.values[self.size.index(p)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub sigma: f64,
}

impl GaussianSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self { sigma: 8.0 }
    }
}

/// Per-pixel `[background, foreground]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FgPrediction {
    size: ImageSize,
    logits: Vec<[f64; 2]>,
}

impl FgPrediction {
    pub fn new(size: ImageSize, logits: Vec<[f64; 2]>) -> Result<Self> {
        if logits.len() != size.pixels() {
            return Err(Error::dims("logit count does not match image size"));
        }
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite foreground logit".into()));
        }
        Ok(Self { size, logits })
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn logits(&self) -> &[[f64; 2]] {
        &self.logits
    }

    pub fn fg_probability(&self, index: usize) -> f64 {
        let [bg, fg] = self.logits[index];
        sigmoid(fg - bg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub point: PixelPoint,
    pub score: f64,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Ground-truth heatmap: a Gaussian at each instance centroid, merged by
/// per-pixel maximum. Centroids stay real-valued.
pub fn build_gt_heatmap(instances: &[BinaryMask], size: ImageSize, spec: GaussianSpec) -> Result<Heatmap> {
    let centroids = instances
        .iter()
        .map(|m| {
            if m.size() != size {
                return Err(Error::dims("instance mask not on the heatmap grid"));
            }
            mask_centroid(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(heatmap_from_centroids(&centroids, size, spec))
}

pub fn heatmap_from_centroids(centroids: &[Centroid], size: ImageSize, spec: GaussianSpec) -> Heatmap {
    let inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
    // beyond this radius exp() underflows to 0 anyway
    let reach = (spec.sigma * 40.0f64.sqrt() * 2.0).ceil();
    let mut values = vec![0.0f64; size.pixels()];
    for c in centroids {
        let x0 = (c.x - reach).floor().max(0.0) as usize;
        let y0 = (c.y - reach).floor().max(0.0) as usize;
        let x1 = ((c.x + reach).ceil().max(0.0) as usize).min(size.w - 1);
        let y1 = ((c.y + reach).ceil().max(0.0) as usize).min(size.h - 1);
        for y in y0..=y1 {
            let dy = y as f64 - c.y;
            for x in x0..=x1 {
                let dx = x as f64 - c.x;
                let v = (-(dx * dx + dy * dy) * inv).exp();
                let slot = &mut values[y * size.w + x];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    Heatmap { size, values }
}

/// Mean squared per-pixel difference.
pub fn heatmap_mse(pred: &Heatmap, gt: &Heatmap) -> Result<f64> {
    if pred.size != gt.size {
        return Err(Error::dims("heatmap sizes differ"));
    }
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Class-balanced pixel weights `(w_fg, w_bg)`: each pixel weighs the inverse of
/// its class count, normalized so all pixel weights sum to 1. An absent class
/// gets weight 0.
pub fn class_weights(fg_count: usize, bg_count: usize) -> (f64, f64) {
    let inv = |c: usize| if c == 0 { 0.0 } else { 1.0 / c as f64 };
    let (a, b) = (inv(fg_count), inv(bg_count));
    let z = a * fg_count as f64 + b * bg_count as f64;
    if z == 0.0 {
        return (0.0, 0.0);
    }
    (a / z, b / z)
}

/// Numerically stable two-class softmax cross-entropy and its gradient with
/// respect to `[bg, fg]` logits.
pub(crate) fn softmax_ce(logits: [f64; 2], is_fg: bool) -> (f64, [f64; 2]) {
    let [bg, fg] = logits;
    let m = bg.max(fg);
    let lse = m + ((bg - m).exp() + (fg - m).exp()).ln();
    let p_fg = (fg - lse).exp();
    let p_bg = (bg - lse).exp();
    if is_fg {
        (lse - fg, [p_bg, p_fg - 1.0])
    } else {
        (lse - bg, [p_bg - 1.0, p_fg])
    }
}

/// Class-weighted softmax cross-entropy over all pixels.
pub fn weighted_ce(pred: &FgPrediction, gt_fg: &BinaryMask) -> Result<f64> {
    if pred.size != gt_fg.size() {
        return Err(Error::dims("prediction and mask sizes differ"));
    }
    let labels = gt_fg.to_dense();
    let fg = labels.iter().filter(|&&b| b).count();
    let (wf, wb) = class_weights(fg, labels.len() - fg);
    Ok(pred
        .logits
        .iter()
        .zip(&labels)
        .map(|(&l, &is_fg)| {
            let (ce, _) = softmax_ce(l, is_fg);
            if is_fg {
                wf * ce
            } else {
                wb * ce
            }
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub foreground: f64,
    pub heatmap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            foreground: 0.1,
            heatmap: 1.0,
        }
    }
}

pub fn hpg_loss(l_fg: f64, l_h: f64, weights: LossWeights) -> f64 {
    weights.foreground * l_fg + weights.heatmap * l_h
}

/// Pixels whose foreground probability strictly exceeds `threshold`.
pub fn binarize_foreground(pred: &FgPrediction, threshold: f64) -> BinaryMask {
    let dense: Vec<bool> = (0..pred.logits.len())
        .map(|i| pred.fg_probability(i) > threshold)
        .collect();
    rle_encode(&dense, pred.size).expect("dense mask built on prediction grid")
}

/// Local maxima of a 3x3 window (clipped at the border) that exceed
/// `threshold` and lie inside `fg`, best `k` by value. Equal values keep
/// row-major order.
pub fn select_peaks(heat: &Heatmap, fg: &BinaryMask, k: usize, threshold: f64) -> Result<Vec<Keypoint>> {
    if heat.size != fg.size() {
        return Err(Error::dims("heatmap and foreground sizes differ"));
    }
    let ImageSize { h, w } = heat.size;
    let fg = fg.to_dense();
    let v = &heat.values;
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let value = v[i];
            if value.is_nan() || value <= threshold || !fg[i] {
                continue;
            }
            let is_max = (y.saturating_sub(1)..=(y + 1).min(h - 1)).all(|yy| {
                (x.saturating_sub(1)..=(x + 1).min(w - 1)).all(|xx| v[yy * w + xx] <= value)
            });
            if is_max {
                peaks.push(Keypoint {
                    point: PixelPoint::new(x, y),
                    score: value,
                });
            }
        }
    }
    // stable sort keeps row-major order among ties
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks.truncate(k);
    Ok(peaks)
}
