//! Instance-segmentation evaluation: pairwise F-measure, optimal one-to-one
//! matching, overlap and boundary precision/recall/F, and the share of ground
//! truth objects segmented with F at or above 0.75.
//!
//! Degenerate cases: with no predictions precision is 1; with no ground truth
//! recall is 1; F is 0 whenever `P + R == 0`. A scene with neither scores
//! `(1, 1, 1)` and an F75 of 100.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{boundary, dilate, BinaryMask, ImageSize};

/// `2PR / (P + R)`, or 0 when both are 0.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_grid(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Option<ImageSize>> {
    let mut sizes = preds.iter().chain(gts).map(|m| m.size());
    let Some(first) = sizes.next() else {
        return Ok(None);
    };
    if sizes.any(|s| s != first) {
        return Err(Error::dims("masks under evaluation are on different grids"));
    }
    Ok(Some(first))
}

/// `F[i][j]` between prediction `i` and ground truth `j`.
pub fn pairwise_f(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Vec<Vec<f64>>> {
    check_grid(preds, gts)?;
    preds
        .iter()
        .map(|c| {
            gts.iter()
                .map(|g| {
                    let inter = c.intersection_area(g)? as f64;
                    if inter == 0.0 {
                        return Ok(0.0);
                    }
                    // 2PR/(P+R) with P = I/|c| and R = I/|g|, in a rounding-free form
                    Ok(2.0 * inter / (c.area() + g.area()) as f64)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(pred, gt)` pairs with positive score, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl MatchResult {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    pub fn gt_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

/// Maximum-weight one-to-one assignment on a rectangular score matrix
/// (rows are predictions). Zero-score pairs are left out of the result.
pub fn hungarian_match(scores: &[Vec<f64>]) -> MatchResult {
    let n = scores.len();
    let m = scores.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return MatchResult {
            pairs: vec![],
            scores: vec![],
        };
    }
    // the solver wants rows <= cols
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let cost = |i: usize, j: usize| -> f64 {
        let s = if transposed { scores[j][i] } else { scores[i][j] };
        -s
    };
    let row_of_col = min_cost_assignment(rows, cols, cost);
    let mut pairs: Vec<(usize, usize)> = row_of_col
        .iter()
        .enumerate()
        .filter_map(|(j, r)| r.map(|i| if transposed { (j, i) } else { (i, j) }))
        .filter(|&(p, g)| scores[p][g] > 0.0)
        .collect();
    pairs.sort_unstable();
    let s = pairs.iter().map(|&(p, g)| scores[p][g]).collect();
    MatchResult { pairs, scores: s }
}

/// Shortest-augmenting-path assignment with potentials for `rows <= cols`.
/// Returns the row assigned to each column.
fn min_cost_assignment(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    owner[1..].iter().map(|&r| (r != 0).then(|| r - 1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Raw sums behind a [`Prf`], kept so scenes can be pooled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub precision_hits: f64,
    pub pred_total: f64,
    pub recall_hits: f64,
    pub gt_total: f64,
}

impl PrfCounts {
    pub fn prf(&self) -> Prf {
        let precision = if self.pred_total == 0.0 {
            1.0
        } else {
            self.precision_hits / self.pred_total
        };
        let recall = if self.gt_total == 0.0 {
            1.0
        } else {
            self.recall_hits / self.gt_total
        };
        let f = if self.pred_total == 0.0 && self.gt_total == 0.0 {
            1.0
        } else {
            f_measure(precision, recall)
        };
        Prf { precision, recall, f }
    }

    fn add(&mut self, o: &PrfCounts) {
        self.precision_hits += o.precision_hits;
        self.pred_total += o.pred_total;
        self.recall_hits += o.recall_hits;
        self.gt_total += o.gt_total;
    }
}

pub fn overlap_counts(preds: &[BinaryMask], gts: &[BinaryMask], matching: &MatchResult) -> Result<PrfCounts> {
    check_grid(preds, gts)?;
    let mut hits = 0.0;
    for &(p, g) in &matching.pairs {
        hits += preds[p].intersection_area(&gts[g])? as f64;
    }
    Ok(PrfCounts {
        precision_hits: hits,
        pred_total: preds.iter().map(|m| m.area() as f64).sum(),
        recall_hits: hits,
        gt_total: gts.iter().map(|m| m.area() as f64).sum(),
    })
}

pub fn overlap_prf(preds: &[BinaryMask], gts: &[BinaryMask], matching: &MatchResult) -> Result<Prf> {
    Ok(overlap_counts(preds, gts, matching)?.prf())
}

fn dilate_nonempty(dense: &[bool], size: ImageSize, radius: f64) -> Vec<bool> {
    if dense.iter().any(|&b| b) {
        dilate(dense, size, radius)
    } else {
        vec![false; dense.len()]
    }
}

fn hits(a: &[bool], b: &[bool]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64
}

pub fn boundary_counts(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    matching: &MatchResult,
    tolerance: f64,
) -> Result<PrfCounts> {
    let Some(size) = check_grid(preds, gts)? else {
        return Ok(PrfCounts::default());
    };
    let edge = |m: &BinaryMask| boundary(&m.to_dense(), size);
    let pred_edges: Vec<Vec<bool>> = preds.iter().map(edge).collect();
    let gt_edges: Vec<Vec<bool>> = gts.iter().map(edge).collect();
    let count = |v: &Vec<bool>| v.iter().filter(|&&b| b).count() as f64;
    let mut out = PrfCounts {
        pred_total: pred_edges.iter().map(count).sum(),
        gt_total: gt_edges.iter().map(count).sum(),
        ..PrfCounts::default()
    };
    for &(p, g) in &matching.pairs {
        let (bp, bg) = (&pred_edges[p], &gt_edges[g]);
        out.precision_hits += hits(bp, &dilate_nonempty(bg, size, tolerance));
        out.recall_hits += hits(bg, &dilate_nonempty(bp, size, tolerance));
    }
    Ok(out)
}

/// Boundary P/R/F with a disk tolerance of `tolerance` pixels.
pub fn boundary_prf(preds: &[BinaryMask], gts: &[BinaryMask], matching: &MatchResult, tolerance: f64) -> Result<Prf> {
    Ok(boundary_counts(preds, gts, matching, tolerance)?.prf())
}

/// Ground truths whose matched pairwise F is at least 0.75.
pub fn f75_count(matching: &MatchResult) -> usize {
    matching.scores.iter().filter(|&&s| s >= 0.75).count()
}

/// Percentage of ground truths whose matched pairwise F is at least 0.75.
pub fn f75(gt_count: usize, matching: &MatchResult) -> f64 {
    if gt_count == 0 {
        return 100.0;
    }
    100.0 * f75_count(matching) as f64 / gt_count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: usize,
    pub overlap: Prf,
    pub boundary: Prf,
    pub f75: f64,
    pub overlap_counts: PrfCounts,
    pub boundary_counts: PrfCounts,
    pub gt_count: usize,
    pub pred_count: usize,
    pub f75_hits: usize,
}

pub fn evaluate_scene(scene: usize, preds: &[BinaryMask], gts: &[BinaryMask], tolerance: f64) -> Result<SceneMetrics> {
    let matching = hungarian_match(&pairwise_f(preds, gts)?);
    let overlap_counts = overlap_counts(preds, gts, &matching)?;
    let boundary_counts = boundary_counts(preds, gts, &matching, tolerance)?;
    Ok(SceneMetrics {
        scene,
        overlap: overlap_counts.prf(),
        boundary: boundary_counts.prf(),
        f75: f75(gts.len(), &matching),
        overlap_counts,
        boundary_counts,
        gt_count: gts.len(),
        pred_count: preds.len(),
        f75_hits: f75_count(&matching),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Unweighted mean of per-scene metrics.
    #[default]
    PerImageMean,
    /// Pixel sums pooled over all scenes before dividing.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation: Aggregation,
    pub tolerance: f64,
    pub overlap: Prf,
    pub boundary: Prf,
    pub f75: f64,
    pub scenes: Vec<SceneMetrics>,
}

pub const DEFAULT_TOLERANCE: f64 = 2.0;

/// Evaluates `preds[i]` against `gts[i]` for every scene.
pub fn evaluate_dataset(
    preds: &[Vec<BinaryMask>],
    gts: &[Vec<BinaryMask>],
    tolerance: f64,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Dataset(format!(
            "{} predicted scenes vs {} ground-truth scenes",
            preds.len(),
            gts.len()
        )));
    }
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::Config("boundary tolerance must be non-negative".into()));
    }
    let scenes = preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| evaluate_scene(i, p, g, tolerance))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(scenes, tolerance, aggregation))
}

pub fn aggregate(scenes: Vec<SceneMetrics>, tolerance: f64, aggregation: Aggregation) -> MetricsReport {
    let n = scenes.len() as f64;
    let (overlap, boundary, f75) = match aggregation {
        _ if scenes.is_empty() => {
            let one = Prf {
                precision: 1.0,
                recall: 1.0,
                f: 1.0,
            };
            (one, one, 100.0)
        }
        Aggregation::PerImageMean => {
            let mean = |get: &dyn Fn(&SceneMetrics) -> Prf| Prf {
                precision: scenes.iter().map(|s| get(s).precision).sum::<f64>() / n,
                recall: scenes.iter().map(|s| get(s).recall).sum::<f64>() / n,
                f: scenes.iter().map(|s| get(s).f).sum::<f64>() / n,
            };
            (
                mean(&|s| s.overlap),
                mean(&|s| s.boundary),
                scenes.iter().map(|s| s.f75).sum::<f64>() / n,
            )
        }
        Aggregation::Pooled => {
            let (mut o, mut b) = (PrfCounts::default(), PrfCounts::default());
            for s in &scenes {
                o.add(&s.overlap_counts);
                b.add(&s.boundary_counts);
            }
            let gts: usize = scenes.iter().map(|s| s.gt_count).sum();
            let hits: usize = scenes.iter().map(|s| s.f75_hits).sum();
            let f75 = if gts == 0 { 100.0 } else { 100.0 * hits as f64 / gts as f64 };
            (o.prf(), b.prf(), f75)
        }
    };
    MetricsReport {
        aggregation,
        tolerance,
        overlap,
        boundary,
        f75,
        scenes,
    }
}

/// Plain-text table with one row per labelled report, values scaled by 100.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(7);
    let mut s = String::new();
    s.push_str(&format!(
        "{:label_w$}  {:^20}  {:^20}  {:>6}\n",
        "", "Overlap", "Boundary", ""
    ));
    s.push_str(&format!(
        "{:label_w$}  {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}  {:>6}\n",
        "Method", "P", "R", "F", "P", "R", "F", "%75"
    ));
    for (label, r) in rows {
        s.push_str(&format!(
            "{:label_w$}  {:>6.1} {:>6.1} {:>6.1}  {:>6.1} {:>6.1} {:>6.1}  {:>6.1}\n",
            label,
            100.0 * r.overlap.precision,
            100.0 * r.overlap.recall,
            100.0 * r.overlap.f,
            100.0 * r.boundary.precision,
            100.0 * r.boundary.recall,
            100.0 * r.boundary.f,
            r.f75
        ));
    }
    s
}
