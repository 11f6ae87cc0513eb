//! Residual IoU-score refinement over proposer tokens.
//!
//! For every slot `k` the network sees `[iou_token, mask_token_k]` and its
//! scalar output is added to the proposer's base score. Training targets are
//! the IoU of each candidate mask against the instance under the prompt, or 0
//! for prompts on the background.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_iou, BinaryMask, PixelPoint};
use crate::proposer::{MaskProposal, MaskProposer, SLOTS};
use crate::rng;
use crate::synthgen::Scene;
use crate::tinynn::{fit, split_indices, Layer, Mlp, Objective, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedProposal {
    pub proposal: MaskProposal,
    pub refined_scores: [f64; SLOTS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdnetSample {
    /// `SLOTS x 2C` rows of `[iou_token, mask_token_k]`.
    pub features: Array2<f64>,
    pub base_scores: [f64; SLOTS],
    pub targets: [f64; SLOTS],
    /// Prompt lies on an instance.
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdnetConfig {
    pub hidden: Vec<usize>,
    /// Prompts sampled per training scene.
    pub prompts_per_scene: usize,
    /// Fraction of those prompts drawn from the background.
    pub bg_fraction: f64,
}

impl Default for HdnetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            prompts_per_scene: 30,
            bg_fraction: 1.0 / 3.0,
        }
    }
}

impl HdnetConfig {
    pub fn dims(&self, channels: usize) -> Vec<usize> {
        std::iter::once(2 * channels)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect()
    }
}

/// Stacks `[iou_token, mask_token_k]` for the four slots.
pub fn features(proposal: &MaskProposal) -> Result<Array2<f64>> {
    proposal.validate()?;
    let c = proposal.channels();
    let mut out = Array2::zeros((SLOTS, 2 * c));
    for (k, token) in proposal.mask_tokens.iter().enumerate() {
        let mut row = out.row_mut(k);
        for (dst, src) in row.iter_mut().zip(proposal.iou_token.iter().chain(token)) {
            *dst = *src;
        }
    }
    Ok(out)
}

fn check_net(net: &Mlp, width: usize) -> Result<()> {
    if net.input_dim() != width || net.output_dim() != 1 {
        return Err(Error::dims(format!(
            "scoring network is {:?}, expected input {width} and one output",
            net.dims()
        )));
    }
    Ok(())
}

pub fn refine_scores(proposal: &MaskProposal, net: &Mlp) -> Result<RefinedProposal> {
    let x = features(proposal)?;
    check_net(net, x.ncols())?;
    let residual = net.forward(x.view())?;
    let refined_scores = std::array::from_fn(|k| residual[[k, 0]] + proposal.base_scores[k]);
    Ok(RefinedProposal {
        proposal: proposal.clone(),
        refined_scores,
    })
}

/// Scores left as the proposer produced them.
pub fn unrefined(proposal: &MaskProposal) -> RefinedProposal {
    RefinedProposal {
        proposal: proposal.clone(),
        refined_scores: proposal.base_scores,
    }
}

/// IoU of `generated` with the instance under `prompt`, or 0 on background.
pub fn iou_target(prompt: PixelPoint, generated: &BinaryMask, scene: &Scene) -> Result<f64> {
    match scene.instance_at(prompt) {
        Some(i) => mask_iou(&scene.instances()[i], generated),
        None => Ok(0.0),
    }
}

/// Mean over prompts of the per-prompt mean squared slot error.
pub fn hdnet_loss(pred: &[[f64; SLOTS]], target: &[[f64; SLOTS]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dims(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / SLOTS as f64)
        .sum();
    Ok(total / pred.len() as f64)
}

/// Training prompts for one scene: `round(m * bg_fraction)` uniform background
/// pixels, the rest drawn by picking an instance uniformly and then a pixel
/// uniformly inside it.
pub fn sample_prompts(scene: &Scene, m: usize, bg_fraction: f64, seed: u64) -> Result<Vec<PixelPoint>> {
    if m == 0 {
        return Err(Error::Sampling("prompts_per_scene must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&bg_fraction) {
        return Err(Error::Sampling("bg_fraction must lie in [0, 1]".into()));
    }
    let n_bg = (m as f64 * bg_fraction).round() as usize;
    let n_pos = m - n_bg;
    let size = scene.size();
    let mut rng = rng::rng(seed);
    let mut prompts = Vec::with_capacity(m);
    if n_pos > 0 {
        if scene.instances().is_empty() {
            return Err(Error::Sampling("scene has no instances for positive prompts".into()));
        }
        let pixel_lists: Vec<Vec<usize>> = scene
            .instances()
            .iter()
            .map(|inst| inst.intervals().flat_map(|(s, e)| s..e).collect())
            .collect();
        for _ in 0..n_pos {
            let list = &pixel_lists[rng.random_range(0..pixel_lists.len())];
            prompts.push(size.point(list[rng.random_range(0..list.len())]));
        }
    }
    if n_bg > 0 {
        let bg: Vec<usize> = scene
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 0)
            .map(|(i, _)| i)
            .collect();
        if bg.is_empty() {
            return Err(Error::Sampling("scene has no background pixels".into()));
        }
        for _ in 0..n_bg {
            prompts.push(size.point(bg[rng.random_range(0..bg.len())]));
        }
    }
    Ok(prompts)
}

pub fn make_sample(proposal: &MaskProposal, scene: &Scene) -> Result<HdnetSample> {
    let mut targets = [0.0; SLOTS];
    for (t, m) in targets.iter_mut().zip(&proposal.masks) {
        *t = iou_target(proposal.prompt, m, scene)?;
    }
    Ok(HdnetSample {
        features: features(proposal)?,
        base_scores: proposal.base_scores,
        targets,
        positive: scene.instance_at(proposal.prompt).is_some(),
    })
}

/// Samples for one scene; scene `i` of a set uses `derive(seed, i)`.
pub fn scene_samples(
    scene: &Scene,
    scene_index: usize,
    cfg: &HdnetConfig,
    proposer: &dyn MaskProposer,
    seed: u64,
) -> Result<Vec<HdnetSample>> {
    let scene_seed = rng::derive(seed, scene_index as u64);
    let prompts = sample_prompts(scene, cfg.prompts_per_scene, cfg.bg_fraction, scene_seed)?;
    prompts
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let proposal = proposer.propose(scene, scene_index, p, rng::derive(scene_seed, j as u64 + 1))?;
            make_sample(&proposal, scene)
        })
        .collect()
}

pub fn build_training_set(
    scenes: &[Scene],
    cfg: &HdnetConfig,
    proposer: &dyn MaskProposer,
    seed: u64,
) -> Result<Vec<HdnetSample>> {
    let mut out = Vec::with_capacity(scenes.len() * cfg.prompts_per_scene);
    for (i, scene) in scenes.iter().enumerate() {
        out.extend(scene_samples(scene, i, cfg, proposer, seed)?);
    }
    Ok(out)
}

struct ResidualMse {
    features: Array2<f64>,
    base: Array2<f64>,
    targets: Array2<f64>,
    train: Vec<usize>,
    val_features: Array2<f64>,
    val_offset: Array2<f64>,
}

impl ResidualMse {
    fn new(samples: &[HdnetSample], train: Vec<usize>, val: &[usize]) -> Self {
        let width = samples[0].features.ncols();
        let mut features = Array2::zeros((samples.len() * SLOTS, width));
        let mut base = Array2::zeros((samples.len() * SLOTS, 1));
        let mut targets = Array2::zeros((samples.len() * SLOTS, 1));
        for (i, smp) in samples.iter().enumerate() {
            features
                .slice_mut(s![i * SLOTS..(i + 1) * SLOTS, ..])
                .assign(&smp.features);
            for k in 0..SLOTS {
                base[[i * SLOTS + k, 0]] = smp.base_scores[k];
                targets[[i * SLOTS + k, 0]] = smp.targets[k];
            }
        }
        let val_rows: Vec<usize> = val.iter().flat_map(|&i| i * SLOTS..(i + 1) * SLOTS).collect();
        let val_features = features.select(Axis(0), &val_rows);
        let val_offset = &base.select(Axis(0), &val_rows) - &targets.select(Axis(0), &val_rows);
        Self {
            features,
            base,
            targets,
            train,
            val_features,
            val_offset,
        }
    }

    fn rows(&self, items: &[usize]) -> Vec<usize> {
        items
            .iter()
            .flat_map(|&i| {
                let s = self.train[i];
                s * SLOTS..(s + 1) * SLOTS
            })
            .collect()
    }
}

impl Objective for ResidualMse {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch(&self, net: &Mlp, items: &[usize], _seed: u64) -> Result<(f64, Vec<Layer>)> {
        let rows = self.rows(items);
        let x = self.features.select(Axis(0), &rows);
        let offset = &self.base.select(Axis(0), &rows) - &self.targets.select(Axis(0), &rows);
        let (out, cache) = net.forward_cached(x.view())?;
        let diff = out + &offset;
        let n = rows.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grads = net.backward(&cache, (diff * (2.0 / n)).view())?;
        Ok((loss, grads.layers))
    }

    fn validation_loss(&self, net: &Mlp) -> Result<f64> {
        if self.val_features.nrows() == 0 {
            return Ok(0.0);
        }
        let diff = net.forward(self.val_features.view())? + &self.val_offset;
        Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.nrows() as f64)
    }
}

/// Trains the residual scorer on `samples`, holding out `cfg.val_fraction`
/// of them for checkpoint selection.
pub fn train_hdnet(samples: &[HdnetSample], hidden: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Sampling("no HDNet training samples".into()));
    }
    let width = samples[0].features.ncols();
    if samples.iter().any(|s| s.features.dim() != (SLOTS, width)) {
        return Err(Error::dims("HDNet samples have inconsistent feature widths"));
    }
    let (train, val) = split_indices(samples.len(), cfg.val_fraction, rng::derive(cfg.seed, 0x5a11));
    let objective = ResidualMse::new(samples, train, &val);
    let dims: Vec<usize> = std::iter::once(width)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    let net = Mlp::new(&dims, rng::derive(cfg.seed, 0x1417))?;
    fit(net, &objective, cfg)
}

/// Refined scores for a batch of samples (rows of the returned vector follow
/// `samples`). With `net = None` the base scores are returned.
pub fn score_samples(samples: &[HdnetSample], net: Option<&Mlp>) -> Result<Vec<[f64; SLOTS]>> {
    let Some(net) = net else {
        return Ok(samples.iter().map(|s| s.base_scores).collect());
    };
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let views: Vec<ArrayView2<f64>> = chunk.iter().map(|s| s.features.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::dims(e.to_string()))?;
        check_net(net, x.ncols())?;
        let r = net.forward(x.view())?;
        for (i, smp) in chunk.iter().enumerate() {
            out.push(std::array::from_fn(|k| r[[i * SLOTS + k, 0]] + smp.base_scores[k]));
        }
    }
    Ok(out)
}

/// First index of the maximum (lowest slot wins ties).
pub fn argmax_slot(scores: &[f64; SLOTS]) -> usize {
    let mut best = 0;
    for k in 1..SLOTS {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    best
}

/// Fraction of positive samples whose top-scored slot has the highest target
/// IoU (slots tied on target all count as correct).
pub fn ranking_accuracy(samples: &[HdnetSample], scores: &[[f64; SLOTS]]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (smp, sc) in samples.iter().zip(scores) {
        if !smp.positive {
            continue;
        }
        total += 1;
        let best = smp.targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if smp.targets[argmax_slot(sc)] >= best {
            hits += 1;
        }
    }
    if total == 0 {
        return 1.0;
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{rle_encode, ImageSize};
    use crate::proposer::{propose, OracleConfig, OracleProposer, Slot};
    use crate::synthgen::{generate_dataset, SceneConfig};
    use crate::RgbImage;
    use ndarray::{array, Array1};

    fn small_scenes(n: usize, seed: u64) -> Vec<Scene> {
        let cfg = SceneConfig {
            size: ImageSize::new(48, 64).unwrap(),
            object_count: [3, 6],
            ..SceneConfig::default()
        };
        generate_dataset(&cfg, seed, n).unwrap()
    }

    fn proposal(scene: &Scene, channels: usize) -> MaskProposal {
        let p = scene.size().point(scene.instances()[0].intervals().next().unwrap().0);
        propose(
            scene,
            p,
            &OracleConfig {
                channels,
                ..OracleConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn feature_layout() {
        let scene = &small_scenes(1, 1)[0];
        let p = proposal(scene, 12);
        let f = features(&p).unwrap();
        assert_eq!(f.dim(), (4, 24));
        for k in 0..4 {
            assert_eq!(f.slice(s![k, ..12]).to_vec(), p.iou_token);
            assert_eq!(f.slice(s![k, 12..]).to_vec(), p.mask_tokens[k]);
        }
    }

    #[test]
    fn zero_net_is_identity() {
        let scene = &small_scenes(1, 2)[0];
        let p = proposal(scene, 16);
        let r = refine_scores(&p, &Mlp::zeros(&[32, 8, 8, 1]).unwrap()).unwrap();
        assert_eq!(r.refined_scores, p.base_scores);
    }

    #[test]
    fn constant_net_shifts_scores() {
        let scene = &small_scenes(1, 2)[0];
        let p = proposal(scene, 16);
        let net = Mlp::from_layers(vec![Layer {
            weight: Array2::zeros((1, 32)),
            bias: Array1::from(vec![0.125]),
        }])
        .unwrap();
        let r = refine_scores(&p, &net).unwrap();
        for k in 0..4 {
            assert_eq!(r.refined_scores[k], p.base_scores[k] + 0.125);
        }
    }

    #[test]
    fn fixture_net_matches_manual_algebra() {
        // C = 1: features per slot are [iou_token[0], mask_token_k[0]]
        let size = ImageSize::new(2, 2).unwrap();
        let m = BinaryMask::full(size);
        let p = MaskProposal {
            prompt: PixelPoint::new(0, 0),
            masks: [m.clone(), m.clone(), m.clone(), m],
            base_scores: [0.1, 0.2, 0.3, 0.4],
            iou_token: vec![2.0],
            mask_tokens: [vec![1.0], vec![-1.0], vec![0.5], vec![-3.0]],
        };
        let net = Mlp::from_layers(vec![
            Layer {
                weight: array![[1.0, 1.0], [0.0, -1.0]],
                bias: array![-1.0, 0.5],
            },
            Layer {
                weight: array![[0.5, 2.0]],
                bias: array![0.25],
            },
        ])
        .unwrap();
        // slot 0: h = relu(2, -0.5) = (2, 0) -> 1.25
        // slot 1: h = relu(0, 1.5) = (0, 1.5) -> 3.25
        // slot 2: h = relu(1.5, 0) = (1.5, 0) -> 1.0
        // slot 3: h = relu(-2, 3.5) = (0, 3.5) -> 7.25
        let r = refine_scores(&p, &net).unwrap();
        assert_eq!(r.refined_scores, [1.35, 3.45, 1.3, 7.65]);
        assert!(refine_scores(&p, &Mlp::zeros(&[3, 1]).unwrap()).is_err());
    }

    #[test]
    fn targets() {
        let size = ImageSize::new(4, 6).unwrap();
        // gt: 2x3 block at x 0..3, y 0..2 (6 px)
        let mut d = vec![false; 24];
        for y in 0..2 {
            for x in 0..3 {
                d[y * 6 + x] = true;
            }
        }
        let gt = rle_encode(&d, size).unwrap();
        let scene = Scene::new(RgbImage::filled(size, [0, 0, 0]), vec![gt.clone()]).unwrap();
        assert_eq!(iou_target(PixelPoint::new(5, 3), &gt, &scene).unwrap(), 0.0);
        assert_eq!(iou_target(PixelPoint::new(1, 1), &gt, &scene).unwrap(), 1.0);
        // half of gt (top row, 3 px) and nothing else: 3 / 6
        let mut h = vec![false; 24];
        h[..3].fill(true);
        let half = rle_encode(&h, size).unwrap();
        let inter = d.iter().zip(&h).filter(|(a, b)| **a && **b).count() as f64;
        let uni = d.iter().zip(&h).filter(|(a, b)| **a || **b).count() as f64;
        assert_eq!(iou_target(PixelPoint::new(1, 1), &half, &scene).unwrap(), inter / uni);
        assert_eq!(inter / uni, 0.5);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(hdnet_loss(&[[0.3; 4]], &[[0.3; 4]]).unwrap(), 0.0);
        assert!((hdnet_loss(&[[0.4; 4], [0.0; 4]], &[[0.3; 4], [0.1; 4]]).unwrap() - 0.01).abs() < 1e-15);
        // prompt 1: errors (0.1, 0.2, 0, 0) -> 0.05 / 4 = 0.0125
        // prompt 2: errors (0.5, 0, 0, 0.5) -> 0.5 / 4 = 0.125
        let l = hdnet_loss(
            &[[0.1, 0.2, 0.0, 0.0], [0.5, 0.0, 0.0, 0.5]],
            &[[0.0; 4], [0.0; 4]],
        )
        .unwrap();
        assert!((l - (0.0125 + 0.125) / 2.0).abs() < 1e-15);
        assert!(hdnet_loss(&[[0.0; 4]], &[]).is_err());
    }

    #[test]
    fn training_set_contract() {
        let scenes = small_scenes(4, 5);
        let oracle = OracleProposer::new(OracleConfig {
            channels: 16,
            ..OracleConfig::default()
        })
        .unwrap();
        let cfg = HdnetConfig {
            prompts_per_scene: 9,
            ..HdnetConfig::default()
        };
        let set = build_training_set(&scenes, &cfg, &oracle, 1).unwrap();
        assert_eq!(set.len(), 36);
        assert_eq!(set.iter().filter(|s| !s.positive).count(), 4 * 3);

        let all_bg = HdnetConfig {
            bg_fraction: 1.0,
            ..cfg.clone()
        };
        for s in build_training_set(&scenes, &all_bg, &oracle, 1).unwrap() {
            assert!(!s.positive);
            assert_eq!(s.targets, [0.0; 4]);
        }

        let clean = OracleProposer::new(OracleConfig::noise_free(16)).unwrap();
        let all_fg = HdnetConfig {
            bg_fraction: 0.0,
            ..cfg
        };
        for s in build_training_set(&scenes, &all_fg, &clean, 2).unwrap() {
            assert!(s.positive);
            assert_eq!(s.targets[Slot::Part.index()], 1.0);
        }
    }

    #[test]
    fn sampling_errors() {
        let size = ImageSize::new(4, 4).unwrap();
        let empty = Scene::new(RgbImage::filled(size, [0, 0, 0]), vec![]).unwrap();
        assert!(matches!(sample_prompts(&empty, 3, 0.5, 0), Err(Error::Sampling(_))));
        assert_eq!(sample_prompts(&empty, 3, 1.0, 0).unwrap().len(), 3);
        let full = Scene::new(RgbImage::filled(size, [0, 0, 0]), vec![BinaryMask::full(size)]).unwrap();
        assert!(matches!(sample_prompts(&full, 3, 0.5, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn training_reduces_validation_loss() {
        let scenes = small_scenes(12, 9);
        let oracle = OracleProposer::new(OracleConfig {
            channels: 16,
            ..OracleConfig::default()
        })
        .unwrap();
        let cfg = HdnetConfig {
            prompts_per_scene: 20,
            ..HdnetConfig::default()
        };
        let samples = build_training_set(&scenes, &cfg, &oracle, 4).unwrap();
        assert_eq!(samples.len(), 240);
        let tc = TrainConfig {
            epochs: 12,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train_hdnet(&samples, &[32, 32], &tc).unwrap();
        assert!(out.best_val_loss < out.initial_val_loss);
        assert!(out.log[0].train_loss > out.log[out.best_epoch].train_loss);
        let again = train_hdnet(&samples, &[32, 32], &tc).unwrap();
        assert_eq!(again.best_val_loss, out.best_val_loss);
    }
}
