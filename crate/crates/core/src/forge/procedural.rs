//! Procedurally generated stand-ins for the background flow pairs and the
//! segmentation source images, so the forge runs without external datasets.
//!
//! Backgrounds are layered scenes: a smooth multi-frequency texture under a
//! small affine drift, plus one or two textured shapes translating by a few
//! pixels. Flow labels are exact because every layer's motion is analytic.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{create_dir, write_flo, write_gray8, write_png_rgb, write_text};
use super::{
    forge_dataset, BackgroundManifest, BackgroundPair, ClassEntry, CutoutManifest, CutoutSource, DatasetManifest,
    ForgeConfig, VOC_CLASSES,
};
use crate::par::Execution;
use crate::domain::{FlowField, Image};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProceduralConfig {
    /// Number of background pairs.
    pub pairs: usize,
    /// `(width, height)` of the backgrounds.
    pub size: (usize, usize),
    /// Number of labeled source images for cutouts.
    pub cutout_images: usize,
    /// Side of each cutout source image.
    pub cutout_image_size: usize,
    /// Largest shape translation, pixels.
    pub max_object_motion: f64,
    /// Largest background translation, pixels.
    pub max_background_drift: f64,
    pub seed: u64,
}

impl Default for ProceduralConfig {
    fn default() -> Self {
        ProceduralConfig {
            pairs: 8,
            size: (64, 64),
            cutout_images: 4,
            cutout_image_size: 48,
            max_object_motion: 2.0,
            max_background_drift: 0.4,
            seed: 7,
        }
    }
}

/// Sum of oriented sinusoids per channel.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: Vec<(usize, f64, f64, f64, f64)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, min_period: f64, max_period: f64, amp: f64) -> Self {
        let base = [
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        ];
        let waves = (0..9)
            .map(|i| {
                let period = rng.random_range(min_period..max_period);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / period;
                (i % 3, k * dir.cos(), k * dir.sin(), rng.random_range(0.0..std::f64::consts::TAU), amp * rng.random_range(0.5..1.0))
            })
            .collect();
        Texture { base, waves }
    }

    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for &(ch, kx, ky, phase, a) in &self.waves {
            let s = a * (kx * x + ky * y + phase).sin();
            // every wave also feeds the luminance of the other channels
            for (j, v) in c.iter_mut().enumerate() {
                *v += if j == ch { s } else { 0.35 * s };
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, r: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, min: f64, max: f64) -> Self {
        let a = rng.random_range(min..max) / 2.0;
        let b = rng.random_range(min..max) / 2.0;
        if rng.random_bool(0.5) {
            Shape::Ellipse { cx, cy, rx: a, ry: b }
        } else {
            Shape::Rect {
                cx,
                cy,
                hw: a,
                hh: b,
                r: a.min(b) * 0.4,
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, r } => {
                let qx = ((x - cx).abs() - (hw - r)).max(0.0);
                let qy = ((y - cy).abs() - (hh - r)).max(0.0);
                qx * qx + qy * qy <= r * r
            }
        }
    }
}

struct Mover {
    shape: Shape,
    texture: Texture,
    motion: (f64, f64),
}

/// Background motion `p ↦ c + R·s·(p − c) + t`.
struct Affine {
    center: (f64, f64),
    cos: f64,
    sin: f64,
    scale: f64,
    shift: (f64, f64),
}

impl Affine {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        (
            self.center.0 + self.scale * (self.cos * dx - self.sin * dy) + self.shift.0,
            self.center.1 + self.scale * (self.sin * dx + self.cos * dy) + self.shift.1,
        )
    }

    fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (
            (x - self.shift.0 - self.center.0) / self.scale,
            (y - self.shift.1 - self.center.1) / self.scale,
        );
        (
            self.center.0 + self.cos * dx + self.sin * dy,
            self.center.1 - self.sin * dx + self.cos * dy,
        )
    }
}

struct Scene {
    background: Texture,
    motion: Affine,
    movers: Vec<Mover>,
}

/// 2×2 supersampling offsets.
const SUBPIXELS: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

impl Scene {
    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize, cfg: &ProceduralConfig) -> Self {
        let drift = cfg.max_background_drift;
        let angle = rng.random_range(-0.2f64..0.2).to_radians();
        let motion = Affine {
            center: (w as f64 / 2.0, h as f64 / 2.0),
            cos: angle.cos(),
            sin: angle.sin(),
            scale: 1.0 + rng.random_range(-0.003..0.003),
            shift: (rng.random_range(-drift..=drift), rng.random_range(-drift..=drift)),
        };
        let side = w.min(h) as f64;
        let n = rng.random_range(1..=2);
        let movers = (0..n)
            .map(|_| {
                let cx = rng.random_range(0.25 * w as f64..0.75 * w as f64);
                let cy = rng.random_range(0.25 * h as f64..0.75 * h as f64);
                let shape = Shape::random(rng, cx, cy, 0.2 * side, 0.4 * side);
                let mag = rng.random_range(1.5f64.min(cfg.max_object_motion)..=cfg.max_object_motion);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                Mover {
                    shape,
                    texture: Texture::random(rng, 4.0, 10.0, 0.18),
                    motion: (mag * dir.cos(), mag * dir.sin()),
                }
            })
            .collect();
        Scene {
            background: Texture::random(rng, 5.0, 16.0, 0.14),
            motion,
            movers,
        }
    }

    fn color0(&self, x: f64, y: f64) -> [f64; 3] {
        for m in self.movers.iter().rev() {
            if m.shape.contains(x, y) {
                return m.texture.eval(x, y);
            }
        }
        self.background.eval(x, y)
    }

    fn color1(&self, x: f64, y: f64) -> [f64; 3] {
        for m in self.movers.iter().rev() {
            let (px, py) = (x - m.motion.0, y - m.motion.1);
            if m.shape.contains(px, py) {
                return m.texture.eval(px, py);
            }
        }
        let (px, py) = self.motion.invert(x, y);
        self.background.eval(px, py)
    }

    fn flow(&self, x: f64, y: f64) -> (f64, f64) {
        for m in self.movers.iter().rev() {
            if m.shape.contains(x, y) {
                return m.motion;
            }
        }
        let (tx, ty) = self.motion.apply(x, y);
        (tx - x, ty - y)
    }

    fn render(&self, h: usize, w: usize, second: bool) -> Result<Image> {
        let img = Image::from_fn(h, w, |y, x| {
            let mut acc = [0.0; 3];
            for (ox, oy) in SUBPIXELS {
                let (sx, sy) = (x as f64 + ox, y as f64 + oy);
                let c = if second { self.color1(sx, sy) } else { self.color0(sx, sy) };
                for j in 0..3 {
                    acc[j] += c[j] / SUBPIXELS.len() as f64;
                }
            }
            acc
        })?;
        Ok(img.quantized())
    }
}

/// One background pair with its exact flow (rounded to `f32`).
pub fn background_pair(cfg: &ProceduralConfig, index: usize) -> Result<(Image, Image, FlowField)> {
    let (w, h) = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let scene = Scene::random(&mut rng, w, h, cfg);
    let t0 = scene.render(h, w, false)?;
    let t1 = scene.render(h, w, true)?;
    let flow = FlowField::from_fn(h, w, |y, x| scene.flow(x as f64, y as f64))?.to_f32_precision();
    Ok((t0, t1, flow))
}

/// Source image with two or three labeled shapes, one per quadrant.
pub fn cutout_source(cfg: &ProceduralConfig, index: usize) -> Result<(Image, Vec<u8>)> {
    let s = cfg.cutout_image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    rng.set_stream(index as u64);
    let backdrop = Texture::random(&mut rng, 3.0, 8.0, 0.1);
    let count = rng.random_range(2..=3);
    let half = s as f64 / 2.0;
    let objects: Vec<(u8, Shape, Texture)> = (0..count)
        .map(|k| {
            let cx = half * (0.5 + (k % 2) as f64);
            let cy = half * (0.5 + (k / 2) as f64);
            let shape = Shape::random(&mut rng, cx, cy, 0.6 * half, 0.95 * half);
            let label = rng.random_range(1..=VOC_CLASSES.len() as u8);
            let mut tex = Texture::random(&mut rng, 3.0, 7.0, 0.25);
            // saturated object colors keep pasted regions distinct from backgrounds
            let hue = rng.random_range(0..3);
            tex.base = [0.15, 0.15, 0.15];
            tex.base[hue] = 0.85;
            (label, shape, tex)
        })
        .collect();
    let mut labels = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            for (label, shape, _) in &objects {
                if shape.contains(x as f64, y as f64) {
                    labels[y * s + x] = *label;
                }
            }
        }
    }
    let img = Image::from_fn(s, s, |y, x| {
        for (_, shape, tex) in objects.iter().rev() {
            if shape.contains(x as f64, y as f64) {
                return tex.eval(x as f64, y as f64);
            }
        }
        backdrop.eval(x as f64, y as f64)
    })?;
    Ok((img.quantized(), labels))
}

/// Writes backgrounds and cutout sources under `dir` and returns the paths of
/// the background and cutout manifests.
pub fn generate_sources(dir: &Path, cfg: &ProceduralConfig) -> Result<(PathBuf, PathBuf)> {
    ensure!(cfg.pairs > 0, "at least one background pair is required");
    ensure!(cfg.cutout_images > 0, "at least one cutout source image is required");
    ensure!(
        cfg.cutout_image_size >= 16,
        "cutout source images must be at least 16 pixels wide"
    );
    ensure!(cfg.max_object_motion > 0.0, "object motion must be positive");
    ensure!(cfg.max_background_drift >= 0.0, "background drift must be >= 0");
    let bg_dir = dir.join("backgrounds");
    let seg_dir = dir.join("segmentation");
    create_dir(&bg_dir)?;
    create_dir(&seg_dir)?;
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let (t0, t1, flow) = background_pair(cfg, i)?;
        let id = format!("bg{i:04}");
        let names = [format!("{id}_img1.png"), format!("{id}_img2.png"), format!("{id}_flow.flo")];
        write_png_rgb(&bg_dir.join(&names[0]), &t0)?;
        write_png_rgb(&bg_dir.join(&names[1]), &t1)?;
        write_flo(&bg_dir.join(&names[2]), &flow)?;
        let [a, b, c] = names.map(|n| format!("backgrounds/{n}"));
        pairs.push(BackgroundPair {
            id,
            t0: a,
            t1: b,
            flow: c,
        });
    }
    let mut images = Vec::with_capacity(cfg.cutout_images);
    for i in 0..cfg.cutout_images {
        let (img, labels) = cutout_source(cfg, i)?;
        let s = cfg.cutout_image_size;
        let name = format!("src{i:04}");
        write_png_rgb(&seg_dir.join(format!("{name}.png")), &img)?;
        write_gray8(&seg_dir.join(format!("{name}_seg.png")), s, s, labels)?;
        images.push(CutoutSource {
            image: format!("segmentation/{name}.png"),
            segmentation: format!("segmentation/{name}_seg.png"),
        });
    }
    let bg_path = dir.join("backgrounds.json");
    let cut_path = dir.join("cutouts.json");
    write_text(
        &bg_path,
        &serde_json::to_string_pretty(&BackgroundManifest { pairs }).expect("serializable"),
    )?;
    let classes = VOC_CLASSES
        .iter()
        .enumerate()
        .map(|(i, name)| ClassEntry {
            label: i as u8 + 1,
            name: name.to_string(),
        })
        .collect();
    write_text(
        &cut_path,
        &serde_json::to_string_pretty(&CutoutManifest { classes, images }).expect("serializable"),
    )?;
    Ok((bg_path, cut_path))
}

/// Generates procedural sources under `src_dir` and forges one sample per
/// background pair into `out_dir`.
pub fn forge_procedural(
    src_dir: &Path,
    out_dir: &Path,
    procedural: &ProceduralConfig,
    cfg: &ForgeConfig,
    exec: Execution,
) -> Result<DatasetManifest> {
    let (w, h) = cfg.output_size;
    let procedural = ProceduralConfig {
        size: (w, h),
        ..procedural.clone()
    };
    let (bg, cut) = generate_sources(src_dir, &procedural)?;
    forge_dataset(&bg, &cut, cfg, out_dir, exec)
}
