//! Object cutouts: extraction from labeled images and geometric transforms.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ForgeConfig;
use crate::domain::Image;
use crate::error::{ensure, Result};

/// Per-pixel integer class labels aligned with an image; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// RGBA patch, planar `[4,h,w]`; alpha is the object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCutout {
    pub height: usize,
    pub width: usize,
    pub rgba: Vec<f64>,
    pub class_tag: String,
}

impl ObjectCutout {
    pub fn new(height: usize, width: usize, rgba: Vec<f64>, class_tag: impl Into<String>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "cutout must be nonempty");
        ensure!(rgba.len() == 4 * height * width, "rgba buffer has wrong length");
        ensure!(
            rgba.iter().all(|v| (0.0..=1.0).contains(v)),
            "cutout values must lie in [0,1]"
        );
        Ok(ObjectCutout {
            height,
            width,
            rgba,
            class_tag: class_tag.into(),
        })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.rgba[(c * self.height + y) * self.width + x]
    }

    pub fn alpha(&self) -> &[f64] {
        &self.rgba[3 * self.height * self.width..]
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha().iter().sum()
    }

    /// Pixels whose alpha is at least `threshold`.
    pub fn support(&self, threshold: f64) -> usize {
        self.alpha().iter().filter(|&&a| a >= threshold).count()
    }
}

/// One cutout per 4-connected region whose label is in `classes`.
///
/// `class_name` maps a label to the tag stored on the cutout.
pub fn extract_cutouts(
    image: &Image,
    seg: &LabelMap,
    classes: &[u8],
    class_name: impl Fn(u8) -> String,
) -> Result<Vec<ObjectCutout>> {
    ensure!(
        seg.height == image.height() && seg.width == image.width(),
        "segmentation {}x{} does not match image {}x{}",
        seg.width,
        seg.height,
        image.width(),
        image.height()
    );
    let (h, w) = (seg.height, seg.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let label = seg.data[start];
        if seen[start] || label == 0 || !classes.contains(&label) {
            continue;
        }
        let mut region = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && seg.data[q] == label {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        for &p in &region {
            y0 = y0.min(p / w);
            y1 = y1.max(p / w);
            x0 = x0.min(p % w);
            x1 = x1.max(p % w);
        }
        let (ch, cw) = (y1 - y0 + 1, x1 - x0 + 1);
        let mut rgba = vec![0.0; 4 * ch * cw];
        for &p in &region {
            let (y, x) = (p / w - y0, p % w - x0);
            for c in 0..3 {
                rgba[(c * ch + y) * cw + x] = image.get(p / w, p % w, c);
            }
            rgba[(3 * ch + y) * cw + x] = 1.0;
        }
        out.push(ObjectCutout::new(ch, cw, rgba, class_name(label))?);
    }
    Ok(out)
}

/// Parameters of one cutout transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoutTransform {
    pub scale: f64,
    pub rotation_deg: f64,
    /// Output channel `c` takes input channel `channel_perm[c]`.
    pub channel_perm: [usize; 3],
}

impl CutoutTransform {
    pub const IDENTITY: CutoutTransform = CutoutTransform {
        scale: 1.0,
        rotation_deg: 0.0,
        channel_perm: [0, 1, 2],
    };

    /// Draws scale, rotation and (with the configured probability) a channel permutation.
    pub fn sample(cfg: &ForgeConfig, rng: &mut impl Rng) -> Self {
        let scale = draw(rng, cfg.scale_range);
        let rotation_deg = draw(rng, cfg.rotation_range);
        let mut channel_perm = [0, 1, 2];
        if rng.random_bool(cfg.channel_shuffle_prob) {
            channel_perm.shuffle(rng);
        }
        CutoutTransform {
            scale,
            rotation_deg,
            channel_perm,
        }
    }
}

pub(crate) fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Size of the transformed bounding box.
fn transformed_size(h: usize, w: usize, scale: f64, rotation_deg: f64) -> (usize, usize) {
    let t = rotation_deg.to_radians();
    let (s, c) = (t.sin().abs(), t.cos().abs());
    let ow = scale * (w as f64 * c + h as f64 * s);
    let oh = scale * (w as f64 * s + h as f64 * c);
    let fit = |v: f64| ((v - 1e-9).ceil() as usize).max(1);
    (fit(oh), fit(ow))
}

/// Scales and rotates about the patch center, then permutes color channels.
///
/// Colors are sampled with edge clamping, alpha with zero outside the patch.
pub fn apply_transform(obj: &ObjectCutout, t: &CutoutTransform) -> Result<ObjectCutout> {
    ensure!(t.scale > 0.0, "cutout scale must be positive");
    let (h, w) = (obj.height, obj.width);
    let (oh, ow) = transformed_size(h, w, t.scale, t.rotation_deg);
    let theta = t.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (icx, icy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ocx, ocy) = (ow as f64 / 2.0, oh as f64 / 2.0);
    let mut rgba = vec![0.0; 4 * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let dx = x as f64 + 0.5 - ocx;
            let dy = y as f64 + 0.5 - ocy;
            // inverse rotation and scale
            let sx = (cos * dx + sin * dy) / t.scale + icx - 0.5;
            let sy = (-sin * dx + cos * dy) / t.scale + icy - 0.5;
            let a = sample_zero(obj, 3, sx, sy);
            rgba[(3 * oh + y) * ow + x] = a.clamp(0.0, 1.0);
            for c in 0..3 {
                let v = sample_clamped(obj, t.channel_perm[c], sx, sy);
                rgba[(c * oh + y) * ow + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    ObjectCutout::new(oh, ow, rgba, obj.class_tag.clone())
}

fn taps(v: f64) -> (isize, f64) {
    let f = v.floor();
    (f as isize, v - f)
}

fn sample_zero(obj: &ObjectCutout, c: usize, x: f64, y: f64) -> f64 {
    let (x0, fx) = taps(x);
    let (y0, fy) = taps(y);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= obj.height as isize || xx >= obj.width as isize {
            0.0
        } else {
            obj.get(c, yy as usize, xx as usize)
        }
    };
    lerp2(at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1), fx, fy)
}

fn sample_clamped(obj: &ObjectCutout, c: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (obj.width - 1) as f64);
    let y = y.clamp(0.0, (obj.height - 1) as f64);
    let (x0, fx) = taps(x);
    let (y0, fy) = taps(y);
    let x1 = (x0 + 1).min(obj.width as isize - 1);
    let y1 = (y0 + 1).min(obj.height as isize - 1);
    let at = |yy: isize, xx: isize| obj.get(c, yy as usize, xx as usize);
    lerp2(at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1), fx, fy)
}

fn lerp2(v00: f64, v01: f64, v10: f64, v11: f64, fx: f64, fy: f64) -> f64 {
    // exact at integer sample positions
    if fx == 0.0 && fy == 0.0 {
        return v00;
    }
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Random transform, shrunk to fit when it would exceed `max_h × max_w`.
pub fn transform_cutout(
    obj: &ObjectCutout,
    cfg: &ForgeConfig,
    rng: &mut impl Rng,
) -> Result<(ObjectCutout, CutoutTransform)> {
    let t = CutoutTransform::sample(cfg, rng);
    let t = fit_transform(obj, t, cfg.output_size.1, cfg.output_size.0);
    Ok((apply_transform(obj, &t)?, t))
}

pub(crate) fn fit_transform(obj: &ObjectCutout, mut t: CutoutTransform, max_h: usize, max_w: usize) -> CutoutTransform {
    let (oh, ow) = transformed_size(obj.height, obj.width, t.scale, t.rotation_deg);
    if oh > max_h || ow > max_w {
        let k = (max_h as f64 / oh as f64).min(max_w as f64 / ow as f64) * 0.999;
        log::info!(
            "cutout of {}x{} does not fit {max_w}x{max_h}; scale {:.3} reduced to {:.3}",
            ow,
            oh,
            t.scale,
            t.scale * k
        );
        t.scale *= k;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| [x as f64 / w as f64, y as f64 / h as f64, 0.25]).unwrap()
    }

    fn labels(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> LabelMap {
        LabelMap {
            height: h,
            width: w,
            data: (0..h * w).map(|i| f(i / w, i % w)).collect(),
        }
    }

    fn name(l: u8) -> String {
        format!("c{l}")
    }

    #[test]
    fn background_only_gives_nothing() {
        let seg = labels(16, 16, |_, _| 0);
        assert!(extract_cutouts(&gray(16, 16), &seg, &[1, 2], name).unwrap().is_empty());
    }

    #[test]
    fn square_region_gives_one_full_cutout() {
        let seg = labels(16, 24, |y, x| ((3..13).contains(&y) && (5..15).contains(&x)) as u8 * 7);
        let img = gray(16, 24);
        let cuts = extract_cutouts(&img, &seg, &[7], name).unwrap();
        assert_eq!(cuts.len(), 1);
        let c = &cuts[0];
        assert_eq!((c.height, c.width), (10, 10));
        assert_eq!(c.support(1.0), 100);
        assert_eq!(c.class_tag, "c7");
        assert_eq!(c.get(0, 0, 0), img.get(3, 5, 0));
    }

    #[test]
    fn region_alpha_sums_match_areas() {
        // an L-shape of class 1 and a disjoint bar of class 2, plus an
        // unselected class 3 blob
        let seg = labels(16, 16, |y, x| {
            if (y < 6 && x < 2) || (y == 5 && x < 5) {
                1
            } else if y == 10 && (4..12).contains(&x) {
                2
            } else if y > 13 && x > 13 {
                3
            } else {
                0
            }
        });
        let cuts = extract_cutouts(&gray(16, 16), &seg, &[1, 2], name).unwrap();
        let mut sums: Vec<f64> = cuts.iter().map(ObjectCutout::alpha_sum).collect();
        sums.sort_by(f64::total_cmp);
        assert_eq!(sums, vec![8.0, 15.0]);
    }

    #[test]
    fn mismatched_segmentation_is_rejected() {
        let seg = labels(8, 16, |_, _| 1);
        assert!(extract_cutouts(&gray(16, 16), &seg, &[1], name).is_err());
    }

    fn blob() -> ObjectCutout {
        let (h, w) = (12, 9);
        let mut rgba = vec![0.0; 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let inside = (y as f64 - 5.5).powi(2) / 25.0 + (x as f64 - 4.0).powi(2) / 12.0 <= 1.0;
                for c in 0..3 {
                    rgba[(c * h + y) * w + x] = ((c + 1) * (y + 2 * x) % 11) as f64 / 10.0;
                }
                rgba[(3 * h + y) * w + x] = inside as u8 as f64;
            }
        }
        ObjectCutout::new(h, w, rgba, "blob").unwrap()
    }

    #[test]
    fn identity_transform_is_exact() {
        let obj = blob();
        let out = apply_transform(&obj, &CutoutTransform::IDENTITY).unwrap();
        assert_eq!((out.height, out.width), (obj.height, obj.width));
        for (a, b) in out.rgba.iter().zip(&obj.rgba) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn half_turn_twice_restores_support() {
        let obj = blob();
        let half = CutoutTransform {
            rotation_deg: 180.0,
            ..CutoutTransform::IDENTITY
        };
        let back = apply_transform(&apply_transform(&obj, &half).unwrap(), &half).unwrap();
        assert_eq!((back.height, back.width), (obj.height, obj.width));
        let differ = obj
            .alpha()
            .iter()
            .zip(back.alpha())
            .filter(|(a, b)| (**a >= 0.5) != (**b >= 0.5))
            .count();
        // only pixels on the support boundary may flip
        let perimeter = 2 * (obj.height + obj.width);
        assert!(differ <= 2 * perimeter, "{differ} pixels differ");
        assert!((back.alpha_sum() - obj.alpha_sum()).abs() <= 2.0 * perimeter as f64);
    }

    #[test]
    fn channel_permutation_moves_colors() {
        let obj = blob();
        let t = CutoutTransform {
            channel_perm: [2, 0, 1],
            ..CutoutTransform::IDENTITY
        };
        let out = apply_transform(&obj, &t).unwrap();
        assert_eq!(out.get(0, 3, 4), obj.get(2, 3, 4));
        assert_eq!(out.get(1, 3, 4), obj.get(0, 3, 4));
        assert_eq!(out.alpha(), obj.alpha());
    }

    #[test]
    fn scaling_grows_the_box() {
        let obj = blob();
        let t = CutoutTransform {
            scale: 2.0,
            ..CutoutTransform::IDENTITY
        };
        let out = apply_transform(&obj, &t).unwrap();
        assert_eq!((out.height, out.width), (24, 18));
        let ratio = out.alpha_sum() / obj.alpha_sum();
        assert!((ratio - 4.0).abs() < 0.6, "area ratio {ratio}");
    }

    #[test]
    fn same_seed_same_transform() {
        let cfg = ForgeConfig::default();
        let obj = blob();
        let a = transform_cutout(&obj, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = transform_cutout(&obj, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let t = a.1;
        assert!((0.8..=1.2).contains(&t.scale));
        assert!((-30.0..=30.0).contains(&t.rotation_deg));
        let mut p = t.channel_perm;
        p.sort();
        assert_eq!(p, [0, 1, 2]);
    }

    #[test]
    fn oversized_transforms_are_shrunk() {
        let obj = blob();
        let t = CutoutTransform {
            scale: 3.0,
            rotation_deg: 45.0,
            ..CutoutTransform::IDENTITY
        };
        let t = fit_transform(&obj, t, 16, 16);
        let out = apply_transform(&obj, &t).unwrap();
        assert!(out.height <= 16 && out.width <= 16);
    }
}
