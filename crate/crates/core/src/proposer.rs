//! Promptable mask proposers.
//!
//! A proposer turns one point prompt into four candidate masks at different
//! hierarchy levels, each with a base quality score and a feature token, plus
//! one per-prompt token. [`OracleProposer`] fabricates these from ground truth
//! with a controllable bias toward the over-merged "whole" mask, which is the
//! ranking failure the residual scorer in [`crate::hdnet`] has to learn to undo.
//! [`ReplayProposer`] serves proposals recorded earlier.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::{
    boundary, connected_component, dilate, mask_iou, rle_encode, squared_distance_transform,
    BinaryMask, ImageSize, MaskRecord, PixelPoint,
};
use crate::rng;
use crate::synthgen::Scene;

pub const SLOTS: usize = 4;

/// Hierarchy slot order of every proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Default = 0,
    Whole = 1,
    Part = 2,
    Subpart = 3,
}

impl Slot {
    pub const ALL: [Slot; SLOTS] = [Slot::Default, Slot::Whole, Slot::Part, Slot::Subpart];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    pub prompt: PixelPoint,
    pub masks: [BinaryMask; SLOTS],
    pub base_scores: [f64; SLOTS],
    pub iou_token: Vec<f64>,
    pub mask_tokens: [Vec<f64>; SLOTS],
}

impl MaskProposal {
    pub fn channels(&self) -> usize {
        self.iou_token.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.iou_token.len();
        if self.mask_tokens.iter().any(|t| t.len() != c) {
            return Err(Error::dims("mask token width differs from iou token width"));
        }
        let size = self.masks[0].size();
        if self.masks.iter().any(|m| m.size() != size) {
            return Err(Error::dims("proposal masks on different grids"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Score inflation added to the whole slot.
    pub whole_bias: f64,
    /// Maximum radius in pixels of the per-segment dilate/erode corruption.
    pub boundary_noise: usize,
    /// Angular segments the boundary is split into for corruption.
    pub noise_segments: usize,
    /// Standard deviation of the Gaussian noise on base scores.
    pub score_noise: f64,
    /// Standard deviation of the noise filling token channels past the statistics.
    pub token_noise: f64,
    /// Token width.
    pub channels: usize,
    /// Another instance closer than this many pixels is merged into the whole mask.
    pub merge_distance: f64,
    /// Dilation radius of the whole mask when no neighbour is close enough.
    pub whole_dilation: f64,
    /// Subpart disk radius as a fraction of the instance's equivalent radius.
    pub subpart_scale: f64,
    /// Range of the base score given to background masks before bias and noise.
    pub confusion_range: [f64; 2],
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            whole_bias: 0.3,
            boundary_noise: 2,
            noise_segments: 8,
            score_noise: 0.01,
            token_noise: 0.05,
            channels: 256,
            merge_distance: 2.0,
            whole_dilation: 3.0,
            subpart_scale: 0.6,
            confusion_range: [0.3, 0.9],
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels < 8 {
            return bad("oracle channels must be at least 8");
        }
        if !(self.score_noise >= 0.0 && self.token_noise >= 0.0) {
            return bad("noise standard deviations must be non-negative");
        }
        if self.noise_segments == 0 {
            return bad("noise_segments must be at least 1");
        }
        let [lo, hi] = self.confusion_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("confusion_range must satisfy 0 <= lo <= hi <= 1");
        }
        Ok(())
    }

    /// No corruption, no bias: base scores equal true IoUs.
    pub fn noise_free(channels: usize) -> Self {
        Self {
            whole_bias: 0.0,
            boundary_noise: 0,
            score_noise: 0.0,
            token_noise: 0.0,
            channels,
            ..Self::default()
        }
    }
}

pub trait MaskProposer: Sync {
    /// Proposals for one prompt. `scene_index` identifies the scene within its
    /// dataset; `seed` drives any randomness.
    fn propose(&self, scene: &Scene, scene_index: usize, prompt: PixelPoint, seed: u64) -> Result<MaskProposal>;
}

#[derive(Debug, Clone, Default)]
pub struct OracleProposer {
    pub cfg: OracleConfig,
}

impl OracleProposer {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl MaskProposer for OracleProposer {
    fn propose(&self, scene: &Scene, _scene_index: usize, prompt: PixelPoint, seed: u64) -> Result<MaskProposal> {
        propose(scene, prompt, &self.cfg, seed)
    }
}

/// Oracle proposal for `prompt`. Deterministic in `(scene, prompt, cfg, seed)`.
pub fn propose(scene: &Scene, prompt: PixelPoint, cfg: &OracleConfig, seed: u64) -> Result<MaskProposal> {
    let size = scene.size();
    if !size.contains(prompt) {
        return Err(Error::InvalidPrompt {
            x: prompt.x,
            y: prompt.y,
            w: size.w,
            h: size.h,
        });
    }
    let mut rng = rng::rng(seed);
    let (dense, scores) = match scene.instance_at(prompt) {
        Some(i) => instance_masks(scene, i, prompt, cfg, &mut rng)?,
        None => background_masks(scene, prompt, cfg, &mut rng)?,
    };
    let masks: [BinaryMask; SLOTS] = dense
        .iter()
        .map(|d| rle_encode(d, size))
        .collect::<Result<Vec<_>>>()?
        .try_into()
        .expect("four slots");
    let mut base_scores = [0.0; SLOTS];
    for (k, s) in scores.iter().enumerate() {
        let bias = if k == Slot::Whole.index() { cfg.whole_bias } else { 0.0 };
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.score_noise;
        base_scores[k] = (s + bias + noise).clamp(0.0, 1.0);
    }
    let token_seed: u64 = rng.random();
    let mask_tokens: [Vec<f64>; SLOTS] = std::array::from_fn(|k| {
        synth_tokens(
            &masks[k],
            prompt,
            base_scores[k],
            Slot::ALL[k],
            cfg,
            rng::derive(token_seed, k as u64),
        )
    });
    let iou_token = synth_iou_token(
        scene.image(),
        prompt,
        &base_scores,
        cfg,
        rng::derive(token_seed, SLOTS as u64),
    );
    Ok(MaskProposal {
        prompt,
        masks,
        base_scores,
        iou_token,
        mask_tokens,
    })
}

type SlotMasks = ([Vec<bool>; SLOTS], [f64; SLOTS]);

fn instance_masks(
    scene: &Scene,
    id: usize,
    prompt: PixelPoint,
    cfg: &OracleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SlotMasks> {
    let size = scene.size();
    let gt = &scene.instances()[id];
    let inst = gt.to_dense();

    let part = boundary_noise(&inst, size, cfg.boundary_noise, cfg.noise_segments, rng);
    let default = boundary_noise(&part, size, cfg.boundary_noise, cfg.noise_segments, rng);

    let whole = match nearest_neighbor(scene, id, &inst, cfg.merge_distance) {
        Some(j) => {
            let label = j as u16 + 1;
            inst.iter()
                .zip(scene.labels())
                .map(|(&a, &l)| a || l == label)
                .collect()
        }
        None => dilate(&inst, size, cfg.whole_dilation),
    };

    let area = gt.area() as f64;
    let radius = (cfg.subpart_scale * (area / PI).sqrt()).max(1.5);
    let r2 = radius * radius;
    let disk: Vec<bool> = (0..size.pixels())
        .map(|i| {
            let p = size.point(i);
            let dx = p.x as f64 - prompt.x as f64;
            let dy = p.y as f64 - prompt.y as f64;
            inst[i] && dx * dx + dy * dy <= r2
        })
        .collect();
    let subpart = connected_component(&disk, size, prompt);

    let masks = [default, whole, part, subpart];
    let mut scores = [0.0; SLOTS];
    for (k, m) in masks.iter().enumerate() {
        scores[k] = mask_iou(&rle_encode(m, size)?, gt)?;
    }
    Ok((masks, scores))
}

/// Closest other instance within `max_gap` pixels of `inst`; ties go to the
/// lower index.
fn nearest_neighbor(scene: &Scene, id: usize, inst: &[bool], max_gap: f64) -> Option<usize> {
    let n = scene.instances().len();
    if n < 2 {
        return None;
    }
    let dt = squared_distance_transform(inst, scene.size());
    let mut best = vec![f64::INFINITY; n];
    for (&l, &d) in scene.labels().iter().zip(&dt) {
        if l != 0 && l as usize - 1 != id {
            let b = &mut best[l as usize - 1];
            if d < *b {
                *b = d;
            }
        }
    }
    let limit = max_gap * max_gap;
    best.iter()
        .enumerate()
        .filter(|&(j, &d)| j != id && d <= limit)
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| j)
}

fn background_masks(
    scene: &Scene,
    prompt: PixelPoint,
    cfg: &OracleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SlotMasks> {
    let size = scene.size();
    let bg: Vec<bool> = scene.labels().iter().map(|&l| l == 0).collect();
    let base = 0.08 * size.h.min(size.w) as f64;
    let blob = |radius: f64| -> Vec<bool> {
        let r2 = radius.max(1.0).powi(2);
        let disk: Vec<bool> = (0..size.pixels())
            .map(|i| {
                let p = size.point(i);
                let dx = p.x as f64 - prompt.x as f64;
                let dy = p.y as f64 - prompt.y as f64;
                bg[i] && dx * dx + dy * dy <= r2
            })
            .collect();
        connected_component(&disk, size, prompt)
    };
    let part = boundary_noise(&blob(base), size, cfg.boundary_noise, cfg.noise_segments, rng);
    let default = boundary_noise(&blob(base), size, cfg.boundary_noise, cfg.noise_segments, rng);
    let whole = blob(2.0 * base);
    let subpart = blob(0.5 * base);
    let [lo, hi] = cfg.confusion_range;
    let mut scores = [0.0; SLOTS];
    for s in &mut scores {
        *s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    Ok(([default, whole, part, subpart], scores))
}

/// Dilates or erodes each angular segment of the mask boundary by a random
/// radius up to `amplitude`. Returns the input unchanged when it would empty.
pub fn boundary_noise(
    dense: &[bool],
    size: ImageSize,
    amplitude: usize,
    segments: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    if amplitude == 0 {
        return dense.to_vec();
    }
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in dense.iter().enumerate().filter(|(_, &b)| b) {
        let p = size.point(i);
        sx += p.x as f64;
        sy += p.y as f64;
        n += 1.0;
    }
    if n == 0.0 {
        return dense.to_vec();
    }
    let (cx, cy) = (sx / n, sy / n);
    let offset = rng.random_range(0.0..2.0 * PI);
    // per segment: +r dilates, -r erodes, 0 leaves it alone
    let ops: Vec<i64> = (0..segments)
        .map(|_| {
            let r = rng.random_range(1..=amplitude) as i64;
            match rng.random_range(0..5) {
                0 | 1 => r,
                2 | 3 => -r,
                _ => 0,
            }
        })
        .collect();
    let edge = boundary(dense, size);
    let mut add = vec![false; dense.len()];
    let mut remove = vec![false; dense.len()];
    for (i, _) in edge.iter().enumerate().filter(|(_, &b)| b) {
        let p = size.point(i);
        let angle = ((p.y as f64 - cy).atan2(p.x as f64 - cx) + offset).rem_euclid(2.0 * PI);
        let seg = ((angle / (2.0 * PI) * segments as f64) as usize).min(segments - 1);
        let op = ops[seg];
        if op == 0 {
            continue;
        }
        // erosion by r strips pixels closer than r to the boundary pixel
        let (r, target, limit) = if op > 0 {
            (op, &mut add, (op * op) as f64)
        } else {
            (-op, &mut remove, ((-op - 1) * (-op - 1)) as f64)
        };
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (p.x as i64 + dx, p.y as i64 + dy);
                if x < 0 || y < 0 || x >= size.w as i64 || y >= size.h as i64 {
                    continue;
                }
                if ((dx * dx + dy * dy) as f64) <= limit {
                    target[y as usize * size.w + x as usize] = true;
                }
            }
        }
    }
    let out: Vec<bool> = dense
        .iter()
        .zip(add.iter().zip(&remove))
        .map(|(&m, (&a, &r))| (m && !r) || (!m && a))
        .collect();
    if out.iter().any(|&b| b) {
        out
    } else {
        dense.to_vec()
    }
}

/// Mask-token channel layout.
pub mod token {
    pub const AREA_FRACTION: usize = 0;
    pub const PERIMETER_RATIO: usize = 1;
    pub const OFFSET_X: usize = 2;
    pub const OFFSET_Y: usize = 3;
    pub const SLOT_ONE_HOT: usize = 4;
    pub const BASE_SCORE: usize = 8;
    pub const CONTAINS_PROMPT: usize = 9;
    pub const STATS: usize = 10;

    /// IoU-token channel layout.
    pub const PROMPT_RGB: usize = 0;
    pub const LOCAL_RGB: usize = 3;
    pub const LOCAL_STD: usize = 6;
    pub const BASE_SCORES: usize = 7;
    pub const PROMPT_XY: usize = 11;
    pub const IOU_STATS: usize = 13;
}

fn noise_fill(stats: &[f64], channels: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::rng(seed);
    let mut out: Vec<f64> = stats.iter().copied().take(channels).collect();
    while out.len() < channels {
        let z: f64 = rng.sample(StandardNormal);
        out.push(z * std);
    }
    out
}

/// Mask token: deterministic mask statistics in the leading channels
/// (see [`token`]), seeded Gaussian noise after them.
pub fn synth_tokens(
    mask: &BinaryMask,
    prompt: PixelPoint,
    base_score: f64,
    slot: Slot,
    cfg: &OracleConfig,
    seed: u64,
) -> Vec<f64> {
    let size = mask.size();
    let area = mask.area();
    let mut stats = [0.0; token::STATS];
    stats[token::AREA_FRACTION] = area as f64 / size.pixels() as f64;
    if area > 0 {
        let dense = mask.to_dense();
        let perimeter = boundary(&dense, size).iter().filter(|&&b| b).count();
        stats[token::PERIMETER_RATIO] = perimeter as f64 / area as f64;
        let c = crate::mask::mask_centroid(mask).expect("nonempty mask");
        stats[token::OFFSET_X] = (c.x - prompt.x as f64) / size.w as f64;
        stats[token::OFFSET_Y] = (c.y - prompt.y as f64) / size.h as f64;
    }
    stats[token::SLOT_ONE_HOT + slot.index()] = 1.0;
    stats[token::BASE_SCORE] = base_score;
    stats[token::CONTAINS_PROMPT] = if mask.contains(prompt) { 1.0 } else { 0.0 };
    noise_fill(&stats, cfg.channels, cfg.token_noise, seed)
}

/// Per-prompt token: colour at and around the prompt, the four base scores and
/// the normalized prompt position, then noise.
pub fn synth_iou_token(
    image: &RgbImage,
    prompt: PixelPoint,
    base_scores: &[f64; SLOTS],
    cfg: &OracleConfig,
    seed: u64,
) -> Vec<f64> {
    let size = image.size();
    let mut stats = [0.0; token::IOU_STATS];
    let px = image.pixel(size.index(prompt));
    for c in 0..3 {
        stats[token::PROMPT_RGB + c] = px[c] as f64 / 255.0;
    }
    let (mut sum, mut sum_i, mut sum_i2, mut n) = ([0.0; 3], 0.0, 0.0, 0.0);
    for y in prompt.y.saturating_sub(2)..=(prompt.y + 2).min(size.h - 1) {
        for x in prompt.x.saturating_sub(2)..=(prompt.x + 2).min(size.w - 1) {
            let p = image.pixel(y * size.w + x);
            let mut i = 0.0;
            for c in 0..3 {
                let v = p[c] as f64 / 255.0;
                sum[c] += v;
                i += v / 3.0;
            }
            sum_i += i;
            sum_i2 += i * i;
            n += 1.0;
        }
    }
    for c in 0..3 {
        stats[token::LOCAL_RGB + c] = sum[c] / n;
    }
    let mean = sum_i / n;
    stats[token::LOCAL_STD] = (sum_i2 / n - mean * mean).max(0.0).sqrt();
    stats[token::BASE_SCORES..token::BASE_SCORES + SLOTS].copy_from_slice(base_scores);
    stats[token::PROMPT_XY] = (prompt.x as f64 + 0.5) / size.w as f64;
    stats[token::PROMPT_XY + 1] = (prompt.y as f64 + 0.5) / size.h as f64;
    noise_fill(&stats, cfg.channels, cfg.token_noise, seed)
}

/// Serialized form of one proposal in a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub scene: usize,
    pub prompt: PixelPoint,
    pub masks: Vec<MaskRecord>,
    pub base_scores: Vec<f64>,
    pub iou_token: Vec<f64>,
    pub mask_tokens: Vec<Vec<f64>>,
}

impl ProposalRecord {
    pub fn new(scene: usize, p: &MaskProposal) -> Self {
        Self {
            scene,
            prompt: p.prompt,
            masks: p.masks.iter().map(BinaryMask::to_record).collect(),
            base_scores: p.base_scores.to_vec(),
            iou_token: p.iou_token.clone(),
            mask_tokens: p.mask_tokens.to_vec(),
        }
    }

    pub fn to_proposal(&self) -> Result<MaskProposal> {
        let bad = || Error::Dataset(format!("recorded proposal for scene {} is malformed", self.scene));
        let masks: Vec<BinaryMask> = self
            .masks
            .iter()
            .map(BinaryMask::from_record)
            .collect::<Result<_>>()?;
        let p = MaskProposal {
            prompt: self.prompt,
            masks: masks.try_into().map_err(|_| bad())?,
            base_scores: self.base_scores.clone().try_into().map_err(|_| bad())?,
            iou_token: self.iou_token.clone(),
            mask_tokens: self.mask_tokens.clone().try_into().map_err(|_| bad())?,
        };
        p.validate()?;
        Ok(p)
    }
}

pub const RECORDING_FORMAT: &str = "uoiskit-proposals";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub format: String,
    pub version: u32,
    pub proposals: Vec<ProposalRecord>,
}

impl Recording {
    pub fn new(mut proposals: Vec<ProposalRecord>) -> Self {
        proposals.sort_by_key(|p| (p.scene, p.prompt.y, p.prompt.x));
        proposals.dedup_by_key(|p| (p.scene, p.prompt));
        Self {
            format: RECORDING_FORMAT.to_string(),
            version: 1,
            proposals,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::synthgen::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rec: Recording = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if rec.format != RECORDING_FORMAT {
            return Err(Error::Dataset(format!("{}: not a proposal recording", path.display())));
        }
        Ok(rec)
    }
}

/// Serves proposals from a recording, keyed by scene index and prompt.
#[derive(Debug, Clone, Default)]
pub struct ReplayProposer {
    table: HashMap<(usize, PixelPoint), MaskProposal>,
}

impl ReplayProposer {
    pub fn from_recording(rec: &Recording) -> Result<Self> {
        let table = rec
            .proposals
            .iter()
            .map(|r| Ok(((r.scene, r.prompt), r.to_proposal()?)))
            .collect::<Result<_>>()?;
        Ok(Self { table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl MaskProposer for ReplayProposer {
    fn propose(&self, _scene: &Scene, scene_index: usize, prompt: PixelPoint, _seed: u64) -> Result<MaskProposal> {
        self.table.get(&(scene_index, prompt)).cloned().ok_or_else(|| {
            Error::Dataset(format!(
                "no recorded proposal for scene {scene_index} at ({}, {})",
                prompt.x, prompt.y
            ))
        })
    }
}

/// Wraps a proposer and keeps a copy of everything it returns.
pub struct RecordingProposer<'a> {
    inner: &'a dyn MaskProposer,
    seen: Mutex<Vec<ProposalRecord>>,
}

impl<'a> RecordingProposer<'a> {
    pub fn new(inner: &'a dyn MaskProposer) -> Self {
        Self {
            inner,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn into_recording(self) -> Recording {
        Recording::new(self.seen.into_inner().expect("recording lock poisoned"))
    }
}

impl MaskProposer for RecordingProposer<'_> {
    fn propose(&self, scene: &Scene, scene_index: usize, prompt: PixelPoint, seed: u64) -> Result<MaskProposal> {
        let p = self.inner.propose(scene, scene_index, prompt, seed)?;
        self.seen
            .lock()
            .expect("recording lock poisoned")
            .push(ProposalRecord::new(scene_index, &p));
        Ok(p)
    }
}
