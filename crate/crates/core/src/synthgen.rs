//! Seeded synthetic tabletop scenes: random flat-colored shapes, optionally
//! textured, dropped onto a cluttered background in painter's order. Only the
//! visible part of each object ends up in its instance mask.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::{rle_encode, BinaryMask, ImageSize, MaskRecord, PixelPoint};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub size: ImageSize,
    /// Inclusive `[min, max]` object count.
    pub object_count: [usize; 2],
    pub shapes: Vec<ShapeKind>,
    /// Object radius range as a fraction of the shorter image side.
    pub radius_range: [f64; 2],
    /// Stripe/speckle amplitude inside objects, as a fraction of full scale.
    pub texture_amplitude: f64,
    /// Probability that a new object is dropped onto an existing one.
    pub occlusion_probability: f64,
    /// Low-frequency background variation, as a fraction of full scale.
    pub clutter_amplitude: f64,
    /// Per-pixel sensor noise, as a fraction of full scale.
    pub pixel_noise: f64,
    /// An occluded object must keep at least this fraction of its drawn area.
    pub min_visible_fraction: f64,
    pub min_visible_pixels: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: ImageSize::default(),
            object_count: [4, 11],
            shapes: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Polygon],
            radius_range: [0.06, 0.13],
            texture_amplitude: 0.08,
            occlusion_probability: 0.4,
            clutter_amplitude: 0.06,
            pixel_noise: 0.01,
            min_visible_fraction: 0.35,
            min_visible_pixels: 16,
            max_attempts: 400,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let [lo, hi] = self.object_count;
        if lo < 1 || hi < lo {
            return bad("object_count must satisfy 1 <= min <= max");
        }
        if self.object_count[1] >= u16::MAX as usize {
            return bad("object_count max too large");
        }
        if self.shapes.is_empty() {
            return bad("shapes palette is empty");
        }
        let [r0, r1] = self.radius_range;
        if !(r0 > 0.0 && r1 >= r0 && r1 <= 0.5) {
            return bad("radius_range must satisfy 0 < min <= max <= 0.5");
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return bad("occlusion_probability must lie in [0, 1]");
        }
        for (name, v) in [
            ("texture_amplitude", self.texture_amplitude),
            ("clutter_amplitude", self.clutter_amplitude),
            ("pixel_noise", self.pixel_noise),
            ("min_visible_fraction", self.min_visible_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        ImageSize::new(self.size.h, self.size.w).map(|_| ())
    }
}

/// A synthetic image with its visible instance masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    image: RgbImage,
    instances: Vec<BinaryMask>,
    foreground: BinaryMask,
    /// 0 for background, `i + 1` for instance `i`.
    labels: Vec<u16>,
}

impl Scene {
    /// Validates that instances are nonempty, pairwise disjoint and on the image grid.
    pub fn new(image: RgbImage, instances: Vec<BinaryMask>) -> Result<Self> {
        let size = image.size();
        if instances.len() >= u16::MAX as usize {
            return Err(Error::Dataset("too many instances".into()));
        }
        let mut labels = vec![0u16; size.pixels()];
        for (i, m) in instances.iter().enumerate() {
            if m.size() != size {
                return Err(Error::dims(format!("instance {i} is not on the image grid")));
            }
            if m.is_empty() {
                return Err(Error::Dataset(format!("instance {i} is empty")));
            }
            for (s, e) in m.intervals() {
                for l in &mut labels[s..e] {
                    if *l != 0 {
                        return Err(Error::Dataset(format!(
                            "instances {} and {i} overlap",
                            *l - 1
                        )));
                    }
                    *l = i as u16 + 1;
                }
            }
        }
        let fg: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
        let foreground = rle_encode(&fg, size)?;
        Ok(Self {
            image,
            instances,
            foreground,
            labels,
        })
    }

    pub fn size(&self) -> ImageSize {
        self.image.size()
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn instances(&self) -> &[BinaryMask] {
        &self.instances
    }

    pub fn foreground(&self) -> &BinaryMask {
        &self.foreground
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Index of the instance covering `p`, if any.
    pub fn instance_at(&self, p: PixelPoint) -> Option<usize> {
        if !self.size().contains(p) {
            return None;
        }
        match self.labels[self.size().index(p)] {
            0 => None,
            l => Some(l as usize - 1),
        }
    }
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    hull: Vec<(f64, f64)>,
}

impl Shape {
    fn radius(&self) -> f64 {
        self.a.max(self.b)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            ShapeKind::Ellipse | ShapeKind::Rectangle => {
                let (s, c) = self.angle.sin_cos();
                let u = (dx * c + dy * s) / self.a;
                let v = (-dx * s + dy * c) / self.b;
                if self.kind == ShapeKind::Ellipse {
                    u * u + v * v <= 1.0
                } else {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                }
            }
            ShapeKind::Polygon => {
                let n = self.hull.len();
                (0..n).all(|i| {
                    let (x0, y0) = self.hull[i];
                    let (x1, y1) = self.hull[(i + 1) % n];
                    (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) >= 0.0
                })
            }
        }
    }

    fn rasterize(&self, size: ImageSize) -> Vec<bool> {
        let mut out = vec![false; size.pixels()];
        let r = self.radius().ceil() as isize + 1;
        let x0 = (self.cx as isize - r).max(0) as usize;
        let y0 = (self.cy as isize - r).max(0) as usize;
        let x1 = ((self.cx as isize + r).max(0) as usize).min(size.w - 1);
        let y1 = ((self.cy as isize + r).max(0) as usize).min(size.h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(x as f64, y as f64) {
                    out[y * size.w + x] = true;
                }
            }
        }
        out
    }
}

// Monotone-chain convex hull, counter-clockwise in image coordinates.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn random_shape(cfg: &SceneConfig, rng: &mut ChaCha8Rng, cx: f64, cy: f64, radius: f64) -> Shape {
    let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
    let angle = rng.random_range(0.0..PI);
    let a = radius;
    let b = radius * rng.random_range(0.55..1.0);
    let hull = if kind == ShapeKind::Polygon {
        let n = rng.random_range(5..=8);
        let pts = (0..n)
            .map(|_| {
                let t = rng.random_range(0.0..2.0 * PI);
                let r = radius * rng.random_range(0.75..1.0);
                (r * t.cos(), r * t.sin())
            })
            .collect();
        convex_hull(pts)
    } else {
        Vec::new()
    };
    let kind = if kind == ShapeKind::Polygon && hull.len() < 3 {
        ShapeKind::Ellipse
    } else {
        kind
    };
    Shape {
        kind,
        cx,
        cy,
        a,
        b,
        angle,
        hull,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

enum Texture {
    Flat,
    Stripes { dir: (f64, f64), period: f64 },
    Speckle { salt: u64 },
}

fn speckle(salt: u64, x: usize, y: usize) -> f64 {
    let h = rng::splitmix64(salt ^ ((x as u64) << 32 | y as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

struct Paint {
    color: [f64; 3],
    texture: Texture,
}

impl Paint {
    fn shade(&self, x: usize, y: usize, amplitude: f64) -> [f64; 3] {
        let t = match self.texture {
            Texture::Flat => 0.0,
            Texture::Stripes { dir, period } => {
                ((x as f64 * dir.0 + y as f64 * dir.1) * 2.0 * PI / period).sin()
            }
            Texture::Speckle { salt } => speckle(salt, x, y),
        };
        self.color.map(|c| c + amplitude * t)
    }
}

fn random_paint(rng: &mut ChaCha8Rng) -> Paint {
    let color = hsv_to_rgb(
        rng.random_range(0.0..1.0),
        rng.random_range(0.55..1.0),
        rng.random_range(0.55..1.0),
    );
    let texture = match rng.random_range(0..3) {
        0 => Texture::Flat,
        1 => {
            let t: f64 = rng.random_range(0.0..PI);
            Texture::Stripes {
                dir: (t.cos(), t.sin()),
                period: rng.random_range(4.0..10.0),
            }
        }
        _ => Texture::Speckle { salt: rng.random() },
    };
    Paint { color, texture }
}

/// Generates one scene. Depends only on `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let size = config.size;
    let mut rng = rng::rng(seed);
    let [lo, hi] = config.object_count;
    let wanted = rng.random_range(lo..=hi);
    let short = size.h.min(size.w) as f64;

    let mut labels = vec![0u16; size.pixels()];
    let mut drawn_area: Vec<usize> = Vec::new();
    let mut shapes: Vec<Shape> = Vec::new();
    let mut attempts = 0usize;

    while shapes.len() < wanted {
        attempts += 1;
        if attempts > config.max_attempts * wanted {
            return Err(Error::PlacementFailure {
                wanted,
                attempts: attempts - 1,
            });
        }
        let radius = short * rng.random_range(config.radius_range[0]..=config.radius_range[1]);
        let occlude = !shapes.is_empty() && rng.random_bool(config.occlusion_probability);
        let (cx, cy) = if occlude {
            let host = &shapes[rng.random_range(0..shapes.len())];
            let t = rng.random_range(0.0..2.0 * PI);
            let d = (host.radius() + radius) * rng.random_range(0.55..0.95);
            (host.cx + d * t.cos(), host.cy + d * t.sin())
        } else {
            let m = radius.min(size.w as f64 / 2.0 - 0.5);
            let n = radius.min(size.h as f64 / 2.0 - 0.5);
            (
                rng.random_range(m..=size.w as f64 - 1.0 - m),
                rng.random_range(n..=size.h as f64 - 1.0 - n),
            )
        };
        if cx < 0.0 || cy < 0.0 || cx >= size.w as f64 || cy >= size.h as f64 {
            continue;
        }
        let shape = random_shape(config, &mut rng, cx, cy, radius);
        let raster = shape.rasterize(size);
        let area = raster.iter().filter(|&&b| b).count();
        if area < config.min_visible_pixels {
            continue;
        }
        if !occlude && raster.iter().zip(&labels).any(|(&r, &l)| r && l != 0) {
            continue;
        }
        let id = shapes.len() as u16 + 1;
        let mut trial = labels.clone();
        for (l, &r) in trial.iter_mut().zip(&raster) {
            if r {
                *l = id;
            }
        }
        let mut visible = vec![0usize; shapes.len() + 1];
        for &l in &trial {
            if l != 0 {
                visible[l as usize - 1] += 1;
            }
        }
        let ok = drawn_area.iter().zip(&visible).all(|(&full, &vis)| {
            vis >= config.min_visible_pixels
                && vis as f64 >= config.min_visible_fraction * full as f64
        });
        if !ok {
            continue;
        }
        labels = trial;
        drawn_area.push(area);
        shapes.push(shape);
    }

    let image = render(config, &mut rng, &labels, shapes.len());
    let instances = (1..=shapes.len() as u16)
        .map(|id| {
            let d: Vec<bool> = labels.iter().map(|&l| l == id).collect();
            rle_encode(&d, size)
        })
        .collect::<Result<Vec<_>>>()?;
    Scene::new(image, instances)
}

fn render(config: &SceneConfig, rng: &mut ChaCha8Rng, labels: &[u16], count: usize) -> RgbImage {
    let size = config.size;
    let grey: f64 = rng.random_range(0.35..0.65);
    let tint = [
        rng.random_range(-0.04..0.06),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.06..0.02),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.5..3.0) / size.w as f64,
                rng.random_range(0.5..3.0) / size.h as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let paints: Vec<Paint> = (0..count).map(|_| random_paint(rng)).collect();
    let noise_salt: u64 = rng.random();

    let mut img = RgbImage::filled(size, [0, 0, 0]);
    for y in 0..size.h {
        for x in 0..size.w {
            let i = y * size.w + x;
            let rgb = match labels[i] {
                0 => {
                    let clutter: f64 = waves
                        .iter()
                        .map(|&(_, fx, fy, ph)| {
                            (2.0 * PI * (fx * x as f64 + fy * y as f64) + ph).sin()
                        })
                        .sum::<f64>()
                        / 3.0;
                    let v = grey + config.clutter_amplitude * clutter;
                    tint.map(|t| v + t)
                }
                l => paints[l as usize - 1].shade(x, y, config.texture_amplitude),
            };
            let n = config.pixel_noise * speckle(noise_salt, x, y);
            img.set_pixel(
                i,
                rgb.map(|c| ((c + n).clamp(0.0, 1.0) * 255.0).round() as u8),
            );
        }
    }
    img
}

/// Generates `count` scenes, scene `i` from `scene_seed(global_seed, i)`.
pub fn generate_dataset(config: &SceneConfig, global_seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(config, rng::scene_seed(global_seed, i as u64)))
        .collect()
}

pub const DATASET_FORMAT: &str = "uoiskit-dataset";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub image: String,
    pub instances: Vec<MaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_seed: Option<u64>,
    /// Echo of the configuration that produced the dataset.
    #[serde(default)]
    pub config: serde_json::Value,
    pub scenes: Vec<SceneRecord>,
}

/// Provenance recorded alongside the scenes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    pub global_seed: Option<u64>,
    pub config: serde_json::Value,
    /// Per-scene seeds, either empty or one per scene.
    pub seeds: Vec<u64>,
}

pub fn scene_image_name(index: usize) -> String {
    format!("scene_{index:04}.ppm")
}

pub fn write_dataset(dir: &Path, scenes: &[Scene], meta: &DatasetMeta) -> Result<Manifest> {
    if !meta.seeds.is_empty() && meta.seeds.len() != scenes.len() {
        return Err(Error::Dataset("seed count does not match scene count".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (index, scene) in scenes.iter().enumerate() {
        let name = scene_image_name(index);
        scene.image().write_ppm(&dir.join(&name))?;
        records.push(SceneRecord {
            index,
            seed: meta.seeds.get(index).copied(),
            image: name,
            instances: scene.instances().iter().map(BinaryMask::to_record).collect(),
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.to_string(),
        version: 1,
        global_seed: meta.global_seed,
        config: meta.config.clone(),
        scenes: records,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Dataset(format!(
            "{}: unexpected format {:?}",
            path.display(),
            manifest.format
        )));
    }
    for (i, rec) in manifest.scenes.iter().enumerate() {
        if rec.index != i {
            return Err(Error::Dataset(format!(
                "{}: scene {i} missing (found index {})",
                path.display(),
                rec.index
            )));
        }
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = read_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|rec| {
            let image = RgbImage::read_ppm(&dir.join(&rec.image))?;
            let masks = rec
                .instances
                .iter()
                .map(BinaryMask::from_record)
                .collect::<Result<Vec<_>>>()?;
            Scene::new(image, masks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
