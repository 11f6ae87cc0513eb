//! Image to instance set: foreground and heatmap prediction, peak prompts,
//! four proposals per prompt, residual re-scoring, best-slot selection,
//! suppression and a large-area filter.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdnet::{refine_scores, unrefined, RefinedProposal};
use crate::hpg::{binarize_foreground, select_peaks, Keypoint};
use crate::hpghead::{predict_hpg, HpgOutput};
use crate::mask::{mask_iou, BinaryMask, ImageSize, PixelPoint};
use crate::proposer::{MaskProposer, SLOTS};
use crate::rng;
use crate::synthgen::Scene;
use crate::tinynn::Mlp;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposerKind {
    #[default]
    Oracle,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub fg_threshold: f64,
    pub heat_threshold: f64,
    pub k: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Detections with more pixels than this are dropped; equality is kept.
    pub max_area: usize,
    /// Heatmap Gaussian width used for training targets.
    pub sigma: f64,
    pub proposer: ProposerKind,
    /// Apply the area filter before suppression instead of after.
    pub area_filter_first: bool,
    /// Prompts per side of the uniform grid used by the grid-prompt ablations.
    pub grid_points: usize,
    pub hpg_checkpoint: Option<PathBuf>,
    pub hdnet_checkpoint: Option<PathBuf>,
    /// Recorded proposals served by the replay proposer.
    pub replay_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fg_threshold: 0.85,
            heat_threshold: 0.007,
            k: 30,
            score_threshold: 0.48,
            nms_iou: 0.3,
            max_area: 40_000,
            sigma: 8.0,
            proposer: ProposerKind::Oracle,
            area_filter_first: false,
            grid_points: 32,
            hpg_checkpoint: None,
            hdnet_checkpoint: None,
            replay_path: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.fg_threshold) || !unit(self.heat_threshold) || !unit(self.nms_iou) {
            return bad("fg_threshold, heat_threshold and nms_iou must lie in [0, 1]");
        }
        if !self.score_threshold.is_finite() {
            return bad("score_threshold must be finite");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.grid_points == 0 {
            return bad("grid_points must be at least 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        Ok(())
    }
}

/// Component ablations, each removing one more stage from the full method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Heatmap prompts, foreground gating and residual re-scoring.
    #[default]
    None,
    /// Heatmap prompts and foreground gating, proposer scores as is.
    NoHdnet,
    /// Uniform grid prompts inside the predicted foreground, proposer scores.
    NoHeatmap,
    /// Uniform grid prompts over the whole image, proposer scores.
    NoForeground,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoHdnet, Ablation::NoHeatmap, Ablation::NoForeground];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoHdnet => "no-hdnet",
            Ablation::NoHeatmap => "no-heatmap",
            Ablation::NoForeground => "no-foreground",
        }
    }

    pub fn uses_hdnet(self) -> bool {
        self == Ablation::None
    }

    pub fn uses_hpg(self) -> bool {
        self != Ablation::NoForeground
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: BinaryMask,
    pub score: f64,
    pub prompt: PixelPoint,
    pub slot: usize,
}

/// Highest-scoring slot (lowest index on ties), or nothing when that score
/// is below `score_threshold`.
pub fn select_best(refined: &RefinedProposal, score_threshold: f64) -> Option<Detection> {
    let s = &refined.refined_scores;
    let mut best = 0;
    for k in 1..SLOTS {
        if s[k] > s[best] {
            best = k;
        }
    }
    (s[best] >= score_threshold).then(|| Detection {
        mask: refined.proposal.masks[best].clone(),
        score: s[best],
        prompt: refined.proposal.prompt,
        slot: best,
    })
}

/// Greedy suppression by descending score; equal scores keep input order.
/// A detection goes if its IoU with any kept one exceeds `iou_threshold`.
pub fn nms(detections: Vec<Detection>, iou_threshold: f64) -> Result<Vec<Detection>> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let mut suppressed = false;
        for &j in &keep {
            if mask_iou(&detections[i].mask, &detections[j].mask)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            keep.push(i);
        }
    }
    let mut slots: Vec<Option<Detection>> = detections.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|i| slots[i].take().expect("kept once")).collect())
}

/// Drops detections with more than `max_area` pixels.
pub fn area_filter(detections: Vec<Detection>, max_area: usize) -> Vec<Detection> {
    detections.into_iter().filter(|d| d.mask.area() <= max_area).collect()
}

/// Suppression and area filtering in the configured order.
pub fn postprocess(candidates: Vec<Detection>, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    if cfg.area_filter_first {
        nms(area_filter(candidates, cfg.max_area), cfg.nms_iou)
    } else {
        Ok(area_filter(nms(candidates, cfg.nms_iou)?, cfg.max_area))
    }
}

/// Centres of a `g x g` grid of cells in row-major order; cells that land on
/// the same pixel of a small image yield one prompt.
pub fn grid_prompts(size: ImageSize, g: usize) -> Vec<PixelPoint> {
    let axis = |n: usize| {
        let mut v: Vec<usize> = (0..g)
            .map(|i| (((i as f64 + 0.5) * n as f64 / g as f64) as usize).min(n - 1))
            .collect();
        v.dedup();
        v
    };
    let xs = axis(size.w);
    axis(size.h)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| PixelPoint::new(x, y)))
        .collect()
}

/// Point prompts for one image under `ablation`. `hpg` may only be absent for
/// [`Ablation::NoForeground`].
pub fn prompts(size: ImageSize, hpg: Option<&HpgOutput>, cfg: &PipelineConfig, ablation: Ablation) -> Result<Vec<Keypoint>> {
    let need = || Error::Config("this variant needs HPG predictions".into());
    Ok(match ablation {
        Ablation::None | Ablation::NoHdnet => {
            let hpg = hpg.ok_or_else(need)?;
            let fg = binarize_foreground(&hpg.foreground, cfg.fg_threshold);
            select_peaks(&hpg.heatmap, &fg, cfg.k, cfg.heat_threshold)?
        }
        Ablation::NoHeatmap => {
            let hpg = hpg.ok_or_else(need)?;
            let fg = binarize_foreground(&hpg.foreground, cfg.fg_threshold);
            grid_prompts(size, cfg.grid_points)
                .into_iter()
                .filter(|&p| fg.contains(p))
                .map(|point| Keypoint { point, score: 1.0 })
                .collect()
        }
        Ablation::NoForeground => grid_prompts(size, cfg.grid_points)
            .into_iter()
            .map(|point| Keypoint { point, score: 1.0 })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInference {
    pub prompts: Vec<Keypoint>,
    /// Per-prompt selections before suppression, in prompt order.
    pub candidates: Vec<Detection>,
    pub detections: Vec<Detection>,
}

/// Runs proposal, scoring and post-processing for given prompts. Prompt `p`
/// is proposed with seed `derive(seed, p.y * w + p.x)`.
pub fn infer_from_prompts(
    scene: &Scene,
    scene_index: usize,
    prompts: Vec<Keypoint>,
    hdnet: Option<&Mlp>,
    proposer: &dyn MaskProposer,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<SceneInference> {
    let w = scene.size().w as u64;
    let mut candidates = Vec::new();
    for kp in &prompts {
        let p = kp.point;
        let proposal = proposer.propose(scene, scene_index, p, rng::derive(seed, p.y as u64 * w + p.x as u64))?;
        let refined = match hdnet {
            Some(net) => refine_scores(&proposal, net)?,
            None => unrefined(&proposal),
        };
        candidates.extend(select_best(&refined, cfg.score_threshold));
    }
    let detections = postprocess(candidates.clone(), cfg)?;
    Ok(SceneInference {
        prompts,
        candidates,
        detections,
    })
}

/// Whole-scene inference. The proposer receives the full scene because the
/// oracle reads ground truth; the HPG head only ever sees the image.
#[allow(clippy::too_many_arguments)]
pub fn infer_scene(
    scene: &Scene,
    scene_index: usize,
    hpg: Option<&Mlp>,
    hdnet: Option<&Mlp>,
    proposer: &dyn MaskProposer,
    cfg: &PipelineConfig,
    ablation: Ablation,
    seed: u64,
) -> Result<SceneInference> {
    cfg.validate()?;
    let hpg_out = match (ablation.uses_hpg(), hpg) {
        (true, Some(net)) => Some(predict_hpg(net, scene.image())?),
        (true, None) => return Err(Error::Config("HPG checkpoint missing".into())),
        (false, _) => None,
    };
    let hdnet = match (ablation.uses_hdnet(), hdnet) {
        (true, Some(net)) => Some(net),
        (true, None) => return Err(Error::Config("HDNet checkpoint missing".into())),
        (false, _) => None,
    };
    let kps = prompts(scene.size(), hpg_out.as_ref(), cfg, ablation)?;
    infer_from_prompts(scene, scene_index, kps, hdnet, proposer, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpg::{FgPrediction, Heatmap};
    use crate::image::RgbImage;
    use crate::mask::rle_encode;
    use crate::proposer::{MaskProposal, OracleConfig, OracleProposer};
    use crate::synthgen::{generate_dataset, SceneConfig};
    use proptest::prelude::*;

    fn rect(size: ImageSize, x0: usize, y0: usize, w: usize, h: usize) -> BinaryMask {
        let mut d = vec![false; size.pixels()];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                d[y * size.w + x] = true;
            }
        }
        rle_encode(&d, size).unwrap()
    }

    fn refined(scores: [f64; 4]) -> RefinedProposal {
        let size = ImageSize::new(4, 4).unwrap();
        let masks = std::array::from_fn(|k| rect(size, k, 0, 1, 1));
        RefinedProposal {
            proposal: MaskProposal {
                prompt: PixelPoint::new(1, 1),
                masks,
                base_scores: scores,
                iou_token: vec![0.0; 8],
                mask_tokens: std::array::from_fn(|_| vec![0.0; 8]),
            },
            refined_scores: scores,
        }
    }

    fn det(mask: BinaryMask, score: f64) -> Detection {
        Detection {
            mask,
            score,
            prompt: PixelPoint::new(0, 0),
            slot: 0,
        }
    }

    #[test]
    fn select_best_examples() {
        assert!(select_best(&refined([0.47, 0.1, 0.3, 0.2]), 0.48).is_none());
        assert_eq!(select_best(&refined([0.2, 0.9, 0.5, 0.5]), 0.48).unwrap().slot, 1);
        assert_eq!(select_best(&refined([0.6, 0.6, 0.1, 0.1]), 0.48).unwrap().slot, 0);
        let d = select_best(&refined([0.1, 0.2, 0.48, 0.3]), 0.48).unwrap();
        assert_eq!((d.slot, d.score), (2, 0.48));
    }

    #[test]
    fn nms_examples() {
        let size = ImageSize::new(10, 100).unwrap();
        let a = rect(size, 0, 0, 10, 10);
        let kept = nms(vec![det(a.clone(), 0.8), det(a.clone(), 0.9)], 0.3).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let disjoint: Vec<Detection> = (0..5).map(|i| det(rect(size, i * 12, 0, 10, 10), 0.5)).collect();
        assert_eq!(nms(disjoint.clone(), 0.3).unwrap(), disjoint);
        // 1-pixel-tall strips give exact IoU control
        let wide = ImageSize::new(1, 400).unwrap();
        let s = |x0: usize, w: usize| rect(wide, x0, 0, w, 1);
        // A = [0, 100), B = [x, x + 100): IoU = (100 - x) / (100 + x)
        // x = 53 -> 47 / 153 = 0.3072 ; x = 54 -> 46 / 154 = 0.2987
        let above = s(53, 100);
        let below = s(54, 100);
        let base = s(0, 100);
        let iou_above = mask_iou(&base, &above).unwrap();
        let iou_below = mask_iou(&base, &below).unwrap();
        assert!(iou_above > 0.3 && iou_above < 0.31);
        assert!(iou_below < 0.3 && iou_below > 0.29);
        assert_eq!(nms(vec![det(base.clone(), 0.9), det(above, 0.8)], 0.3).unwrap().len(), 1);
        assert_eq!(nms(vec![det(base, 0.9), det(below, 0.8)], 0.3).unwrap().len(), 2);
    }

    #[test]
    fn nms_ties_keep_prompt_order() {
        let size = ImageSize::new(4, 4).unwrap();
        let m = rect(size, 0, 0, 2, 2);
        let mut first = det(m.clone(), 0.7);
        first.prompt = PixelPoint::new(3, 3);
        let second = det(m, 0.7);
        let kept = nms(vec![first.clone(), second], 0.3).unwrap();
        assert_eq!(kept, vec![first]);
    }

    #[test]
    fn area_filter_boundary() {
        let size = ImageSize::new(201, 201).unwrap();
        let exact = rect(size, 0, 0, 200, 200);
        let mut over_dense = exact.to_dense();
        over_dense[200] = true;
        let over = rle_encode(&over_dense, size).unwrap();
        assert_eq!(over.area(), 40_001);
        let kept = area_filter(vec![det(exact.clone(), 0.9), det(over, 0.9)], 40_000);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].mask, exact);
        assert!(area_filter(vec![], 40_000).is_empty());
    }

    #[test]
    fn grid_is_inside_and_unique() {
        let size = ImageSize::new(48, 64).unwrap();
        let g = grid_prompts(size, 8);
        assert_eq!(g.len(), 64);
        assert_eq!(g[0], PixelPoint::new(4, 3));
        assert!(g.iter().all(|&p| size.contains(p)));
        assert_eq!(grid_prompts(ImageSize::new(2, 2).unwrap(), 4).len(), 4);
    }

    fn fixture_hpg(size: ImageSize, fg: &BinaryMask, peak: PixelPoint) -> HpgOutput {
        let logits = fg
            .to_dense()
            .iter()
            .map(|&f| if f { [0.0, 5.0] } else { [5.0, 0.0] })
            .collect();
        let mut heat = vec![0.0; size.pixels()];
        heat[size.index(peak)] = 0.9;
        HpgOutput {
            foreground: FgPrediction::new(size, logits).unwrap(),
            heatmap: Heatmap::new(size, heat).unwrap(),
        }
    }

    #[test]
    fn prompts_per_variant() {
        let size = ImageSize::new(32, 32).unwrap();
        let fg = rect(size, 0, 0, 16, 32);
        let hpg = fixture_hpg(size, &fg, PixelPoint::new(5, 5));
        let cfg = PipelineConfig {
            grid_points: 4,
            ..PipelineConfig::default()
        };
        let full = prompts(size, Some(&hpg), &cfg, Ablation::None).unwrap();
        assert_eq!(full.iter().map(|k| k.point).collect::<Vec<_>>(), vec![PixelPoint::new(5, 5)]);
        assert_eq!(prompts(size, Some(&hpg), &cfg, Ablation::NoHeatmap).unwrap().len(), 8);
        assert_eq!(prompts(size, None, &cfg, Ablation::NoForeground).unwrap().len(), 16);
        assert!(matches!(prompts(size, None, &cfg, Ablation::NoHdnet), Err(Error::Config(_))));
    }

    #[test]
    fn blank_image_yields_nothing() {
        let size = ImageSize::new(24, 24).unwrap();
        let scene = Scene::new(RgbImage::filled(size, [90, 90, 90]), vec![]).unwrap();
        let hpg = Mlp::zeros(&[9, 4, 3]).unwrap();
        let hd = Mlp::zeros(&[32, 4, 1]).unwrap();
        let oracle = OracleProposer::new(OracleConfig {
            channels: 16,
            ..OracleConfig::default()
        })
        .unwrap();
        // zero net: p_fg = 0.5 < 0.85 everywhere
        let out = infer_scene(&scene, 0, Some(&hpg), Some(&hd), &oracle, &PipelineConfig::default(), Ablation::None, 0).unwrap();
        assert!(out.prompts.is_empty());
        assert!(out.detections.is_empty());
        assert!(matches!(
            infer_scene(&scene, 0, None, Some(&hd), &oracle, &PipelineConfig::default(), Ablation::None, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            infer_scene(&scene, 0, Some(&hpg), None, &oracle, &PipelineConfig::default(), Ablation::None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn noise_free_single_object_is_recovered_exactly() {
        let size = ImageSize::new(40, 40).unwrap();
        let gt = rect(size, 10, 12, 15, 11);
        let mut img = RgbImage::filled(size, [100, 100, 100]);
        for (s, e) in gt.intervals() {
            for i in s..e {
                img.set_pixel(i, [240, 30, 30]);
            }
        }
        let scene = Scene::new(img, vec![gt.clone()]).unwrap();
        let hpg = fixture_hpg(size, &gt, PixelPoint::new(17, 17));
        let oracle = OracleProposer::new(OracleConfig::noise_free(16)).unwrap();
        let cfg = PipelineConfig::default();
        let kps = prompts(size, Some(&hpg), &cfg, Ablation::None).unwrap();
        let hd = Mlp::zeros(&[32, 1]).unwrap();
        let out = infer_from_prompts(&scene, 0, kps, Some(&hd), &oracle, &cfg, 5).unwrap();
        assert_eq!(out.detections.len(), 1);
        assert_eq!(mask_iou(&out.detections[0].mask, &gt).unwrap(), 1.0);
    }

    #[test]
    fn zero_hdnet_equals_baseline_end_to_end() {
        let scenes = generate_dataset(
            &SceneConfig {
                size: ImageSize::new(48, 64).unwrap(),
                ..SceneConfig::default()
            },
            3,
            4,
        )
        .unwrap();
        let oracle = OracleProposer::new(OracleConfig {
            channels: 16,
            ..OracleConfig::default()
        })
        .unwrap();
        let cfg = PipelineConfig {
            grid_points: 6,
            ..PipelineConfig::default()
        };
        let hd = Mlp::zeros(&[32, 8, 1]).unwrap();
        for (i, s) in scenes.iter().enumerate() {
            let kps = prompts(s.size(), None, &cfg, Ablation::NoForeground).unwrap();
            let a = infer_from_prompts(s, i, kps.clone(), Some(&hd), &oracle, &cfg, 9).unwrap();
            let b = infer_from_prompts(s, i, kps, None, &oracle, &cfg, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(PipelineConfig::default().validate().is_ok());
        for bad in [
            PipelineConfig {
                k: 0,
                ..PipelineConfig::default()
            },
            PipelineConfig {
                nms_iou: 1.5,
                ..PipelineConfig::default()
            },
            PipelineConfig {
                sigma: 0.0,
                ..PipelineConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("nope".parse::<Ablation>().is_err());
    }

    fn det_strategy() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((0usize..12, 0usize..12, 1usize..8, 1usize..8, 0u8..10), 0..10).prop_map(|v| {
            let size = ImageSize::new(20, 20).unwrap();
            v.into_iter()
                .map(|(x, y, w, h, s)| det(rect(size, x, y, w, h), s as f64 / 10.0))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn nms_is_idempotent_and_separating(d in det_strategy(), thr in 0.0f64..1.0) {
            let once = nms(d, thr).unwrap();
            for i in 0..once.len() {
                for j in i + 1..once.len() {
                    prop_assert!(mask_iou(&once[i].mask, &once[j].mask).unwrap() <= thr);
                }
            }
            prop_assert_eq!(nms(once.clone(), thr).unwrap(), once);
        }

        #[test]
        fn raising_score_threshold_never_adds(scores in prop::collection::vec(prop::array::uniform4(0.0f64..1.0), 0..20), t in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let count = |thr: f64| scores.iter().filter(|s| select_best(&refined(**s), thr).is_some()).count();
            prop_assert!(count(t + dt) <= count(t));
        }
    }
}
