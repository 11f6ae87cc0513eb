//! Binary masks on a fixed image grid, stored as row-major run lengths.
//!
//! Runs alternate zeros and ones starting with a zeros-run, which may have
//! length 0 when the first pixel is set. Pixel `(x, y)` lives at index
//! `y * w + x`; `x` is the column and `y` the row, origin top-left.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub h: usize,
    pub w: usize,
}

impl ImageSize {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::dims(format!("image size {w}x{h} has a zero side")));
        }
        Ok(Self { h, w })
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        p.x < self.w && p.y < self.h
    }

    #[inline]
    pub fn index(&self, p: PixelPoint) -> usize {
        p.y * self.w + p.x
    }

    #[inline]
    pub fn point(&self, index: usize) -> PixelPoint {
        PixelPoint {
            x: index % self.w,
            y: index / self.w,
        }
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        Self { h: 336, w: 448 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: usize,
    pub y: usize,
}

impl PixelPoint {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// Sub-pixel centroid computed from first-order image moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
}

impl Centroid {
    /// Nearest pixel, rounding half away from zero.
    pub fn rounded(&self) -> PixelPoint {
        PixelPoint::new(self.x.round() as usize, self.y.round() as usize)
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Plain `{h, w, runs}` record used in manifests. Converting it into a
/// [`BinaryMask`] validates the runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub h: usize,
    pub w: usize,
    pub runs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    size: ImageSize,
    runs: Vec<u32>,
}

impl BinaryMask {
    /// Builds a mask from raw runs, checking the run-sum and zero-run invariants.
    pub fn from_runs(size: ImageSize, runs: Vec<u32>) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != size.pixels() as u64 {
            return Err(Error::CorruptMask(format!(
                "runs sum to {total}, expected {}",
                size.pixels()
            )));
        }
        if let Some(pos) = runs.iter().skip(1).position(|&r| r == 0) {
            return Err(Error::CorruptMask(format!(
                "zero-length run at position {}",
                pos + 1
            )));
        }
        Ok(Self { size, runs })
    }

    pub fn empty(size: ImageSize) -> Self {
        Self {
            size,
            runs: vec![size.pixels() as u32],
        }
    }

    pub fn full(size: ImageSize) -> Self {
        Self {
            size,
            runs: vec![0, size.pixels() as u32],
        }
    }

    pub fn from_dense(dense: &[bool], size: ImageSize) -> Result<Self> {
        rle_encode(dense, size)
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.size.pixels());
        let mut value = false;
        for &r in &self.runs {
            out.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        out
    }

    /// Half-open `[start, end)` index intervals of set pixels.
    pub fn intervals(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut pos = 0usize;
        self.runs.chunks(2).filter_map(move |pair| {
            pos += pair[0] as usize;
            let start = pos;
            let len = pair.get(1).copied().unwrap_or(0) as usize;
            pos += len;
            (len > 0).then_some((start, pos))
        })
    }

    pub fn area(&self) -> usize {
        mask_area(self)
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        if !self.size.contains(p) {
            return false;
        }
        let idx = self.size.index(p);
        self.intervals()
            .take_while(|&(s, _)| s <= idx)
            .any(|(s, e)| idx >= s && idx < e)
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        check_same_size(self, other)?;
        let mut a = self.intervals().peekable();
        let mut b = other.intervals().peekable();
        let mut total = 0;
        while let (Some(&(s0, e0)), Some(&(s1, e1))) = (a.peek(), b.peek()) {
            let lo = s0.max(s1);
            let hi = e0.min(e1);
            if hi > lo {
                total += hi - lo;
            }
            if e0 <= e1 {
                a.next();
            } else {
                b.next();
            }
        }
        Ok(total)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_same_size(self, other)?;
        let a = self.to_dense();
        let b = other.to_dense();
        let d: Vec<bool> = a.iter().zip(&b).map(|(&x, &y)| x || y).collect();
        rle_encode(&d, self.size)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_same_size(self, other)?;
        let a = self.to_dense();
        let b = other.to_dense();
        let d: Vec<bool> = a.iter().zip(&b).map(|(&x, &y)| x && y).collect();
        rle_encode(&d, self.size)
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        let w = self.size.w;
        let mut bb: Option<BoundingBox> = None;
        for (s, e) in self.intervals() {
            let (y0, y1) = (s / w, (e - 1) / w);
            let (x0, x1) = if y0 == y1 {
                (s % w, (e - 1) % w)
            } else {
                (0, w - 1)
            };
            bb = Some(match bb {
                None => BoundingBox { x0, y0, x1, y1 },
                Some(b) => BoundingBox {
                    x0: b.x0.min(x0),
                    y0: b.y0.min(y0),
                    x1: b.x1.max(x1),
                    y1: b.y1.max(y1),
                },
            });
        }
        bb
    }

    pub fn to_record(&self) -> MaskRecord {
        MaskRecord {
            h: self.size.h,
            w: self.size.w,
            runs: self.runs.clone(),
        }
    }

    pub fn from_record(rec: &MaskRecord) -> Result<Self> {
        let size = ImageSize::new(rec.h, rec.w)?;
        Self::from_runs(size, rec.runs.clone())
    }
}

fn check_same_size(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.size != b.size {
        return Err(Error::dims(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.size.w, a.size.h, b.size.w, b.size.h
        )));
    }
    Ok(())
}

pub fn rle_encode(dense: &[bool], size: ImageSize) -> Result<BinaryMask> {
    if dense.len() != size.pixels() {
        return Err(Error::dims(format!(
            "dense mask has {} pixels, expected {}",
            dense.len(),
            size.pixels()
        )));
    }
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for &bit in dense {
        if bit != current {
            runs.push(count);
            count = 0;
            current = bit;
        }
        count += 1;
    }
    runs.push(count);
    Ok(BinaryMask { size, runs })
}

pub fn rle_decode(mask: &BinaryMask) -> Result<Vec<bool>> {
    let total: u64 = mask.runs.iter().map(|&r| r as u64).sum();
    if total != mask.size.pixels() as u64 {
        return Err(Error::CorruptMask(format!(
            "runs sum to {total}, expected {}",
            mask.size.pixels()
        )));
    }
    Ok(mask.to_dense())
}

/// Intersection over union. Two empty masks have IoU 1; an empty mask against a
/// nonempty one has IoU 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn mask_area(mask: &BinaryMask) -> usize {
    mask.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
}

/// Centroid `(m10 / m00, m01 / m00)` of the set pixels.
pub fn mask_centroid(mask: &BinaryMask) -> Result<Centroid> {
    let w = mask.size.w;
    let (mut m00, mut m10, mut m01) = (0.0f64, 0.0f64, 0.0f64);
    for (s, e) in mask.intervals() {
        let mut i = s;
        while i < e {
            let y = i / w;
            let x0 = i % w;
            let row_end = ((y + 1) * w).min(e);
            let n = row_end - i;
            let x1 = x0 + n - 1;
            m00 += n as f64;
            m10 += ((x0 + x1) * n) as f64 / 2.0;
            m01 += (y * n) as f64;
            i = row_end;
        }
    }
    if m00 == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(Centroid {
        x: m10 / m00,
        y: m01 / m00,
    })
}

/// Pixels of `dense` with at least one unset 4-neighbour; the image border
/// counts as unset.
pub fn boundary(dense: &[bool], size: ImageSize) -> Vec<bool> {
    let (h, w) = (size.h, size.w);
    let mut out = vec![false; dense.len()];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !dense[i] {
                continue;
            }
            out[i] = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !dense[i - 1]
                || !dense[i + 1]
                || !dense[i - w]
                || !dense[i + w];
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel.
/// Grids without set pixels yield `f64::INFINITY` everywhere.
pub fn squared_distance_transform(dense: &[bool], size: ImageSize) -> Vec<f64> {
    let (h, w) = (size.h, size.w);
    let mut grid: Vec<f64> = dense
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            d.fill(f64::INFINITY);
            return;
        }
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        // z[0] is -inf, so the loop always stops at k == 0
        let s = loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s > z[k] {
                break s;
            }
            k -= 1;
        };
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Disk dilation: every pixel within Euclidean distance `radius` of a set pixel.
pub fn dilate(dense: &[bool], size: ImageSize, radius: f64) -> Vec<bool> {
    if radius <= 0.0 {
        return dense.to_vec();
    }
    let r2 = radius * radius;
    squared_distance_transform(dense, size)
        .into_iter()
        .map(|d| d <= r2)
        .collect()
}

/// Disk erosion, the dual of [`dilate`].
pub fn erode(dense: &[bool], size: ImageSize, radius: f64) -> Vec<bool> {
    let inv: Vec<bool> = dense.iter().map(|&b| !b).collect();
    dilate(&inv, size, radius).into_iter().map(|b| !b).collect()
}

/// 4-connected component of `dense` containing `seed`; empty if `seed` is unset.
pub fn connected_component(dense: &[bool], size: ImageSize, seed: PixelPoint) -> Vec<bool> {
    let mut out = vec![false; dense.len()];
    if !size.contains(seed) || !dense[size.index(seed)] {
        return out;
    }
    let w = size.w;
    let mut stack = vec![size.index(seed)];
    out[size.index(seed)] = true;
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if dense[j] && !out[j] {
                out[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < size.h {
            visit(i + w);
        }
    }
    out
}
