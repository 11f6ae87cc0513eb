//! A per-pixel foreground and centroid-heatmap predictor.
//!
//! Every pixel is described by a handful of hand-made features (colour,
//! position, local intensity statistics, colour-gradient strength and the
//! distance to the nearest strong edge) and a small MLP maps them to two
//! foreground logits plus one heatmap logit. The distance-to-edge channel is
//! what makes object interiors, and thus centroids, separable per pixel.

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpg::{
    build_gt_heatmap, class_weights, heatmap_mse, hpg_loss, sigmoid, softmax_ce, weighted_ce,
    FgPrediction, GaussianSpec, Heatmap, LossWeights,
};
use crate::image::RgbImage;
use crate::mask::{squared_distance_transform, ImageSize};
use crate::rng;
use crate::synthgen::Scene;
use crate::tinynn::{fit, split_indices, Layer, Mlp, Objective, TrainConfig, TrainOutcome};

pub const FEATURE_WIDTH: usize = 9;
/// Output columns: background logit, foreground logit, heatmap logit.
pub const OUTPUT_WIDTH: usize = 3;

/// Blurred colour-gradient magnitude above which a pixel counts as an edge.
pub const EDGE_THRESHOLD: f64 = 0.06;

/// Per-pixel features, one row per pixel in row-major order.
pub fn pixel_features(image: &RgbImage) -> Array2<f64> {
    let size = image.size();
    let (h, w) = (size.h, size.w);
    let n = size.pixels();
    let rgb: Vec<[u8; 3]> = (0..n).map(|i| image.pixel(i)).collect();
    let intensity: Vec<u32> = rgb.iter().map(|p| p.iter().map(|&c| c as u32).sum()).collect();
    let (mean, std) = box_stats(&intensity, size, 2, 3.0 * 255.0);

    let blurred: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let ch: Vec<u32> = rgb.iter().map(|p| p[c] as u32).collect();
            box_stats(&ch, size, 1, 255.0).0
        })
        .collect();
    let mut grad = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let mut g2 = 0.0f64;
            for ch in &blurred {
                let gx = (ch[y * w + xr] - ch[y * w + xl]) / 2.0;
                let gy = (ch[yd * w + x] - ch[yu * w + x]) / 2.0;
                g2 = g2.max(gx * gx + gy * gy);
            }
            grad[y * w + x] = g2.sqrt();
        }
    }
    let edges: Vec<bool> = grad.iter().map(|&g| g > EDGE_THRESHOLD).collect();
    let scale = 0.25 * h.min(w) as f64;
    let dist = squared_distance_transform(&edges, size);

    let mut out = Array2::zeros((n, FEATURE_WIDTH));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (x, y) = (i % w, i / w);
        row[0] = rgb[i][0] as f64 / 255.0;
        row[1] = rgb[i][1] as f64 / 255.0;
        row[2] = rgb[i][2] as f64 / 255.0;
        row[3] = (x as f64 + 0.5) / w as f64;
        row[4] = (y as f64 + 0.5) / h as f64;
        row[5] = mean[i];
        row[6] = std[i];
        row[7] = (grad[i] * 4.0).min(1.0);
        row[8] = (dist[i].sqrt() / scale).min(1.0);
    }
    out
}

/// Mean and standard deviation over a `(2r+1)^2` window clipped at the
/// border, for integer samples divided by `scale`. Integer summed-area tables
/// keep flat regions exactly flat.
fn box_stats(v: &[u32], size: ImageSize, r: usize, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (size.h, size.w);
    // summed-area tables with a zero row and column in front
    let mut s1 = vec![0i64; (h + 1) * (w + 1)];
    let mut s2 = vec![0i64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            let a = v[y * w + x] as i64;
            let o = (y + 1) * (w + 1) + x + 1;
            s1[o] = a + s1[o - 1] + s1[o - w - 1] - s1[o - w - 2];
            s2[o] = a * a + s2[o - 1] + s2[o - w - 1] - s2[o - w - 2];
        }
    }
    let rect = |s: &[i64], x0: usize, y0: usize, x1: usize, y1: usize| {
        s[y1 * (w + 1) + x1] - s[y0 * (w + 1) + x1] - s[y1 * (w + 1) + x0] + s[y0 * (w + 1) + x0]
    };
    let mut mean = vec![0.0; h * w];
    let mut std = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
            let (x1, y1) = ((x + r + 1).min(w), (y + r + 1).min(h));
            let cnt = ((x1 - x0) * (y1 - y0)) as i64;
            let sum = rect(&s1, x0, y0, x1, y1);
            // cnt^2 * variance, exact in integers
            let spread = cnt * rect(&s2, x0, y0, x1, y1) - sum * sum;
            mean[y * w + x] = sum as f64 / cnt as f64 / scale;
            std[y * w + x] = (spread as f64).sqrt() / cnt as f64 / scale;
        }
    }
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpgConfig {
    pub hidden: Vec<usize>,
    pub loss: LossWeights,
    /// Pixels sampled per training image per step.
    pub samples_per_image: usize,
    /// Pixels per validation image; 0 scores every pixel.
    pub val_pixels: usize,
}

impl Default for HpgConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            loss: LossWeights::default(),
            samples_per_image: 4096,
            val_pixels: 0,
        }
    }
}

impl HpgConfig {
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(FEATURE_WIDTH)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(OUTPUT_WIDTH))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpgOutput {
    pub foreground: FgPrediction,
    pub heatmap: Heatmap,
}

/// Foreground logits and heatmap for one image.
pub fn predict_hpg(net: &Mlp, image: &RgbImage) -> Result<HpgOutput> {
    check_net(net)?;
    let x = pixel_features(image);
    let mut logits = Vec::with_capacity(x.nrows());
    let mut heat = Vec::with_capacity(x.nrows());
    for chunk in x.axis_chunks_iter(Axis(0), 8192) {
        let out = net.forward(chunk)?;
        for row in out.rows() {
            logits.push([row[0], row[1]]);
            heat.push(sigmoid(row[2]));
        }
    }
    Ok(HpgOutput {
        foreground: FgPrediction::new(image.size(), logits)?,
        heatmap: Heatmap::new(image.size(), heat)?,
    })
}

fn check_net(net: &Mlp) -> Result<()> {
    if net.input_dim() != FEATURE_WIDTH || net.output_dim() != OUTPUT_WIDTH {
        return Err(Error::dims(format!(
            "HPG network is {:?}, expected {FEATURE_WIDTH} inputs and {OUTPUT_WIDTH} outputs",
            net.dims()
        )));
    }
    Ok(())
}

struct Example {
    features: Array2<f64>,
    fg: Vec<bool>,
    heat: Vec<f64>,
    size: ImageSize,
}

impl Example {
    fn new(scene: &Scene, spec: GaussianSpec) -> Result<Self> {
        let gt = build_gt_heatmap(scene.instances(), scene.size(), spec)?;
        Ok(Self {
            features: pixel_features(scene.image()),
            fg: scene.foreground().to_dense(),
            heat: gt.values().to_vec(),
            size: scene.size(),
        })
    }
}

/// Loss of one image over `rows`, accumulating output gradients scaled by
/// `scale` into `grad` (aligned with `rows`).
fn pixel_loss(
    out: &Array2<f64>,
    ex: &Example,
    rows: &[usize],
    weights: LossWeights,
    scale: f64,
    grad: &mut Array2<f64>,
) -> f64 {
    let fg = rows.iter().filter(|&&r| ex.fg[r]).count();
    let (wf, wb) = class_weights(fg, rows.len() - fg);
    let n = rows.len() as f64;
    let (mut ce, mut mse) = (0.0, 0.0);
    for (j, &r) in rows.iter().enumerate() {
        let is_fg = ex.fg[r];
        let w = if is_fg { wf } else { wb };
        let (l, g) = softmax_ce([out[[j, 0]], out[[j, 1]]], is_fg);
        ce += w * l;
        let s = sigmoid(out[[j, 2]]);
        let d = s - ex.heat[r];
        mse += d * d / n;
        grad[[j, 0]] = scale * weights.foreground * w * g[0];
        grad[[j, 1]] = scale * weights.foreground * w * g[1];
        grad[[j, 2]] = scale * weights.heatmap * 2.0 * d * s * (1.0 - s) / n;
    }
    hpg_loss(ce, mse, weights)
}

struct HpgObjective {
    train: Vec<Example>,
    val: Vec<(Example, Vec<usize>)>,
    cfg: HpgConfig,
}

impl HpgObjective {
    fn new(scenes: &[Scene], spec: GaussianSpec, cfg: &HpgConfig, train_cfg: &TrainConfig) -> Result<Self> {
        let (tr, va) = split_indices(scenes.len(), train_cfg.val_fraction, rng::derive(train_cfg.seed, 0x5a11));
        let train = tr
            .iter()
            .map(|&i| Example::new(&scenes[i], spec))
            .collect::<Result<Vec<_>>>()?;
        let val = va
            .iter()
            .map(|&i| {
                let ex = Example::new(&scenes[i], spec)?;
                let n = ex.size.pixels();
                let rows = if cfg.val_pixels == 0 || cfg.val_pixels >= n {
                    (0..n).collect()
                } else {
                    let mut r = sample(&mut rng::rng(rng::derive(train_cfg.seed, i as u64)), n, cfg.val_pixels).into_vec();
                    r.sort_unstable();
                    r
                };
                Ok((ex, rows))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train,
            val,
            cfg: cfg.clone(),
        })
    }
}

impl Objective for HpgObjective {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch(&self, net: &Mlp, items: &[usize], seed: u64) -> Result<(f64, Vec<Layer>)> {
        let scale = 1.0 / items.len() as f64;
        let mut total = 0.0;
        let mut acc: Option<Vec<Layer>> = None;
        for &i in items {
            let ex = &self.train[i];
            let n = ex.size.pixels();
            let k = self.cfg.samples_per_image.min(n);
            let rows = sample(&mut rng::rng(rng::derive(seed, i as u64)), n, k).into_vec();
            let x = ex.features.select(Axis(0), &rows);
            let (out, cache) = net.forward_cached(x.view())?;
            let mut up = Array2::zeros(out.dim());
            total += scale * pixel_loss(&out, ex, &rows, self.cfg.loss, scale, &mut up);
            let g = net.backward(&cache, up.view())?.layers;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (a, g) in a.iter_mut().zip(g) {
                        a.weight += &g.weight;
                        a.bias += &g.bias;
                    }
                }
            }
        }
        let grads = acc.ok_or_else(|| Error::Sampling("empty HPG batch".into()))?;
        Ok((total, grads))
    }

    fn validation_loss(&self, net: &Mlp) -> Result<f64> {
        if self.val.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (ex, rows) in &self.val {
            let x = ex.features.select(Axis(0), rows);
            let out = net.forward(x.view())?;
            let mut scratch = Array2::zeros(out.dim());
            total += pixel_loss(&out, ex, rows, self.cfg.loss, 1.0, &mut scratch);
        }
        Ok(total / self.val.len() as f64)
    }
}

/// Trains the head on `scenes` against heatmaps of width `spec`;
/// `train_cfg.batch_size` counts images.
pub fn train_hpg(scenes: &[Scene], spec: GaussianSpec, cfg: &HpgConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Sampling("no HPG training scenes".into()));
    }
    if cfg.samples_per_image == 0 {
        return Err(Error::Config("samples_per_image must be at least 1".into()));
    }
    let objective = HpgObjective::new(scenes, spec, cfg, train_cfg)?;
    let net = Mlp::new(&cfg.dims(), rng::derive(train_cfg.seed, 0x4e7))?;
    fit(net, &objective, train_cfg)
}

/// Full-image losses `(l_fg, l_h, total)` of a prediction against a scene.
pub fn scene_loss(pred: &HpgOutput, scene: &Scene, spec: GaussianSpec, weights: LossWeights) -> Result<(f64, f64, f64)> {
    let gt = build_gt_heatmap(scene.instances(), scene.size(), spec)?;
    let l_fg = weighted_ce(&pred.foreground, scene.foreground())?;
    let l_h = heatmap_mse(&pred.heatmap, &gt)?;
    Ok((l_fg, l_h, hpg_loss(l_fg, l_h, weights)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpg::{binarize_foreground, select_peaks};
    use crate::mask::{mask_iou, BinaryMask};
    use crate::synthgen::{generate_dataset, SceneConfig};

    fn scenes(n: usize, seed: u64) -> Vec<Scene> {
        let cfg = SceneConfig {
            size: ImageSize::new(48, 64).unwrap(),
            object_count: [2, 4],
            ..SceneConfig::default()
        };
        generate_dataset(&cfg, seed, n).unwrap()
    }

    #[test]
    fn box_stats_match_brute_force() {
        let size = ImageSize::new(5, 7).unwrap();
        let raw: Vec<u32> = (0..35).map(|i| (i * 37) % 11).collect();
        let v: Vec<f64> = raw.iter().map(|&a| a as f64 / 10.0).collect();
        let (mean, std) = box_stats(&raw, size, 2, 10.0);
        for y in 0..5usize {
            for x in 0..7usize {
                let mut vals = vec![];
                for yy in y.saturating_sub(2)..(y + 3).min(5) {
                    for xx in x.saturating_sub(2)..(x + 3).min(7) {
                        vals.push(v[yy * 7 + xx]);
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
                assert!((mean[y * 7 + x] - m).abs() < 1e-12);
                assert!((std[y * 7 + x] - var.sqrt()).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn features_of_a_flat_image() {
        let size = ImageSize::new(8, 10).unwrap();
        let f = pixel_features(&RgbImage::filled(size, [255, 0, 51]));
        assert_eq!(f.dim(), (80, FEATURE_WIDTH));
        for (i, row) in f.rows().into_iter().enumerate() {
            assert_eq!(row[0], 1.0);
            assert_eq!(row[1], 0.0);
            assert_eq!(row[2], 0.2);
            assert_eq!(row[3], ((i % 10) as f64 + 0.5) / 10.0);
            assert_eq!(row[4], ((i / 10) as f64 + 0.5) / 8.0);
            assert_eq!(row[6], 0.0);
            assert_eq!(row[7], 0.0);
            // no edges anywhere: saturated distance
            assert_eq!(row[8], 1.0);
        }
    }

    #[test]
    fn centre_pixel_coordinates() {
        let f = pixel_features(&RgbImage::filled(ImageSize::new(5, 7).unwrap(), [1, 2, 3]));
        assert_eq!((f[[2 * 7 + 3, 3]], f[[2 * 7 + 3, 4]]), (0.5, 0.5));
    }

    #[test]
    fn step_edge_gradient_peaks_at_the_step() {
        // dark columns 0..6, bright columns 6..12
        let size = ImageSize::new(6, 12).unwrap();
        let mut img = RgbImage::filled(size, [20, 20, 20]);
        for y in 0..6 {
            for x in 6..12 {
                img.set_pixel(y * 12 + x, [220, 220, 220]);
            }
        }
        let f = pixel_features(&img);
        let g: Vec<f64> = (0..12).map(|x| f[[3 * 12 + x, 7]]).collect();
        let max = g.iter().cloned().fold(0.0, f64::max);
        assert!(max > 0.0);
        assert_eq!(g[5], max);
        assert_eq!(g[6], max);
        assert!(g.iter().enumerate().all(|(x, &v)| x == 5 || x == 6 || v < max));
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn edge_distance_peaks_inside_a_square() {
        let size = ImageSize::new(40, 40).unwrap();
        let mut img = RgbImage::filled(size, [128, 128, 128]);
        for y in 10..30 {
            for x in 10..30 {
                img.set_pixel(y * 40 + x, [230, 20, 20]);
            }
        }
        let f = pixel_features(&img);
        let d = |x: usize, y: usize| f[[y * 40 + x, 8]];
        assert!(d(20, 20) > d(14, 20));
        assert!(d(14, 20) > d(11, 20));
        assert!(f[[20 * 40 + 10, 7]] > 0.0);
    }

    #[test]
    fn wrong_shape_rejected() {
        let img = RgbImage::filled(ImageSize::new(4, 4).unwrap(), [0, 0, 0]);
        assert!(predict_hpg(&Mlp::zeros(&[8, 3]).unwrap(), &img).is_err());
        assert!(predict_hpg(&Mlp::zeros(&[9, 2]).unwrap(), &img).is_err());
    }

    #[test]
    fn zero_net_outputs_half() {
        let img = RgbImage::filled(ImageSize::new(4, 5).unwrap(), [9, 9, 9]);
        let out = predict_hpg(&Mlp::zeros(&[9, 4, 3]).unwrap(), &img).unwrap();
        assert!(out.heatmap.values().iter().all(|&v| v == 0.5));
        assert!(out.foreground.logits().iter().all(|&l| l == [0.0, 0.0]));
    }

    fn batch_gradients(weights: LossWeights) -> Vec<Layer> {
        let sc = scenes(3, 1);
        let cfg = HpgConfig {
            hidden: vec![6],
            loss: weights,
            samples_per_image: 64,
            ..HpgConfig::default()
        };
        let tc = TrainConfig {
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let obj = HpgObjective::new(&sc, GaussianSpec::default(), &cfg, &tc).unwrap();
        let net = Mlp::new(&cfg.dims(), 3).unwrap();
        obj.batch(&net, &[0, 1, 2], 11).unwrap().1
    }

    #[test]
    fn zero_foreground_weight_leaves_fg_logits_untrained() {
        let g = batch_gradients(LossWeights {
            foreground: 0.0,
            heatmap: 1.0,
        });
        let last = g.last().unwrap();
        assert!(last.weight.row(0).iter().all(|&v| v == 0.0));
        assert!(last.weight.row(1).iter().all(|&v| v == 0.0));
        assert!(last.bias[0] == 0.0 && last.bias[1] == 0.0);
        assert!(last.weight.row(2).iter().any(|&v| v != 0.0));

        let g = batch_gradients(LossWeights {
            foreground: 1.0,
            heatmap: 0.0,
        });
        assert!(g.last().unwrap().weight.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let sc = scenes(2, 4);
        let cfg = HpgConfig {
            hidden: vec![5],
            samples_per_image: 50,
            ..HpgConfig::default()
        };
        let tc = TrainConfig {
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let obj = HpgObjective::new(&sc, GaussianSpec::default(), &cfg, &tc).unwrap();
        let net = Mlp::new(&cfg.dims(), 8).unwrap();
        let (_, g) = obj.batch(&net, &[0, 1], 5).unwrap();
        let h = 1e-6;
        for (l, gl) in g.iter().enumerate().take(2) {
            for &(r, c) in &[(0usize, 0usize), (1, 3), (2, 4)] {
                if r >= net.layers()[l].weight.nrows() || c >= net.layers()[l].weight.ncols() {
                    continue;
                }
                let mut plus = net.clone();
                plus.layers_mut()[l].weight[[r, c]] += h;
                let mut minus = net.clone();
                minus.layers_mut()[l].weight[[r, c]] -= h;
                let fd = (obj.batch(&plus, &[0, 1], 5).unwrap().0 - obj.batch(&minus, &[0, 1], 5).unwrap().0) / (2.0 * h);
                let an = gl.weight[[r, c]];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "layer {l} ({r},{c}): fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn short_training_learns_foreground_and_peaks() {
        let sc = scenes(24, 7);
        let cfg = HpgConfig {
            hidden: vec![32, 32],
            samples_per_image: 1024,
            ..HpgConfig::default()
        };
        let tc = TrainConfig {
            epochs: 80,
            lr: 3e-3,
            decay_every: 50,
            batch_size: 2,
            val_fraction: 0.2,
            ..TrainConfig::default()
        };
        let spec = GaussianSpec::new(4.0).unwrap();
        let out = train_hpg(&sc, spec, &cfg, &tc).unwrap();
        assert!(out.best_val_loss < 0.5 * out.initial_val_loss);
        let test = &scenes(1, 99)[0];
        let pred = predict_hpg(&out.net, test.image()).unwrap();
        let fg = binarize_foreground(&pred.foreground, 0.5);
        let iou = mask_iou(&fg, test.foreground()).unwrap();
        assert!(iou > 0.8, "foreground IoU {iou}");
        let peaks = select_peaks(&pred.heatmap, &BinaryMask::full(test.size()), 30, 0.007).unwrap();
        assert!(!peaks.is_empty());
        let (_, _, total) = scene_loss(&pred, test, spec, cfg.loss).unwrap();
        assert!(total.is_finite());
    }
}
