//! Shared domain types and the flow / mask utilities every other module builds on.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// RGB image with values in `[0,1]`, stored planar (`[3,H,W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Smallest accepted side length.
    pub const MIN_SIDE: usize = 16;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height >= Self::MIN_SIDE && width >= Self::MIN_SIDE,
            "image {width}x{height} is smaller than {m}x{m}",
            m = Self::MIN_SIDE
        );
        ensure!(
            height % 8 == 0 && width % 8 == 0,
            "image dimensions {width}x{height} must be divisible by 8"
        );
        ensure!(
            data.len() == 3 * height * width,
            "image buffer has {} values, expected {}",
            data.len(),
            3 * height * width
        );
        ensure!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            "image values must lie in [0,1]"
        );
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Image::new(height, width, data)
    }

    /// Builds an image from a per-pixel function returning RGB.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = vec![0.0; 3 * height * width];
        let plane = height * width;
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                for c in 0..3 {
                    data[c * plane + y * width + x] = rgb[c];
                }
            }
        }
        Image::new(height, width, data)
    }

    /// Interleaved 8-bit RGB → image.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() == 3 * height * width,
            "rgb8 buffer has {} bytes, expected {}",
            bytes.len(),
            3 * height * width
        );
        Image::from_fn(height, width, |y, x| {
            let i = 3 * (y * width + x);
            [
                bytes[i] as f64 / 255.0,
                bytes[i + 1] as f64 / 255.0,
                bytes[i + 2] as f64 / 255.0,
            ]
        })
    }

    /// Image → interleaved 8-bit RGB (round to nearest).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(unit_to_u8(self.data[c * plane + i]));
            }
        }
        out
    }

    /// Snaps every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| unit_to_u8(v) as f64 / 255.0)
                .collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.data.clone())
    }

    /// Clamps into `[0,1]`; the tensor must be `[3,H,W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw();
        ensure!(c == 3, "expected 3 channels, got {c}");
        Image::new(h, w, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Centered crop to `height × width`.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<Image> {
        ensure!(
            height <= self.height && width <= self.width,
            "crop {width}x{height} exceeds image {}x{}",
            self.width,
            self.height
        );
        let oy = (self.height - height) / 2;
        let ox = (self.width - width) / 2;
        Image::from_fn(height, width, |y, x| {
            [
                self.get(y + oy, x + ox, 0),
                self.get(y + oy, x + ox, 1),
                self.get(y + oy, x + ox, 2),
            ]
        })
    }
}

pub(crate) fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Dense pixel displacement field: `u` horizontal, `v` vertical, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        ensure!(
            u.len() == height * width && v.len() == height * width,
            "flow components must hold {} values",
            height * width
        );
        ensure!(
            u.iter().chain(&v).all(|x| x.is_finite()),
            "flow contains non-finite values"
        );
        Ok(FlowField {
            height,
            width,
            u,
            v,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowField {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                u.push(a);
                v.push(b);
            }
        }
        FlowField::new(height, width, u, v)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// `[2,H,W]` tensor, channel 0 = u.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.u.clone();
        data.extend_from_slice(&self.v);
        Tensor::from_vec(&[2, self.height, self.width], data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw();
        ensure!(c == 2, "flow tensor needs 2 channels, got {c}");
        FlowField::new(h, w, t.plane(0).to_vec(), t.plane(1).to_vec())
    }

    pub fn scaled(&self, k: f64) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|a| a * k).collect(),
            v: self.v.iter().map(|a| a * k).collect(),
        }
    }

    /// Rounds both components through `f32`, the precision of `.flo` files.
    pub fn to_f32_precision(&self) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|&a| a as f32 as f64).collect(),
            v: self.v.iter().map(|&a| a as f32 as f64).collect(),
        }
    }

    pub fn same_shape(&self, other: &FlowField) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Single-channel real map (magnitudes, per-pixel errors).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Values restricted to `{0,1}`.
    GroundTruth,
    /// Probabilities in `[0,1]`.
    Prediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
    kind: MaskKind,
}

impl ChangeMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>, kind: MaskKind) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "mask buffer has {} values, expected {}",
            data.len(),
            height * width
        );
        match kind {
            MaskKind::GroundTruth => ensure!(
                data.iter().all(|&v| v == 0.0 || v == 1.0),
                "ground-truth mask must be binary"
            ),
            MaskKind::Prediction => ensure!(
                data.iter().all(|v| (0.0..=1.0).contains(v)),
                "prediction mask must lie in [0,1]"
            ),
        }
        Ok(ChangeMask {
            height,
            width,
            data,
            kind,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ChangeMask {
            height,
            width,
            data: vec![0.0; height * width],
            kind: MaskKind::GroundTruth,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.data.clone())
    }

    /// 8-bit encoding used for PNG masks.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| unit_to_u8(v)).collect()
    }
}

/// One dataset record: a frame pair with flow and change labels.
#[derive(Clone, Debug, PartialEq)]
pub struct BitemporalSample {
    pub id: String,
    pub t0: Image,
    pub t1: Image,
    pub flow_label: FlowField,
    pub change_label: ChangeMask,
}

impl BitemporalSample {
    pub fn new(
        id: impl Into<String>,
        t0: Image,
        t1: Image,
        flow_label: FlowField,
        change_label: ChangeMask,
    ) -> Result<Self> {
        let (h, w) = (t0.height(), t0.width());
        ensure!(
            t1.height() == h && t1.width() == w,
            "frame shapes differ: {}x{} vs {}x{}",
            w,
            h,
            t1.width(),
            t1.height()
        );
        ensure!(
            flow_label.height() == h && flow_label.width() == w,
            "flow label shape does not match frames"
        );
        ensure!(
            change_label.height() == h && change_label.width() == w,
            "change label shape does not match frames"
        );
        ensure!(
            change_label.kind() == MaskKind::GroundTruth,
            "change label must be a ground-truth mask"
        );
        Ok(BitemporalSample {
            id: id.into(),
            t0,
            t1,
            flow_label,
            change_label,
        })
    }

    pub fn height(&self) -> usize {
        self.t0.height()
    }

    pub fn width(&self) -> usize {
        self.t0.width()
    }
}

/// Per-pixel Euclidean flow magnitude.
pub fn flow_magnitude(f: &FlowField) -> Result<ScalarMap> {
    ensure!(
        f.u.iter().chain(&f.v).all(|x| x.is_finite()),
        "flow contains non-finite values"
    );
    Ok(ScalarMap {
        height: f.height,
        width: f.width,
        data: f.u.iter().zip(&f.v).map(|(a, b)| a.hypot(*b)).collect(),
    })
}

/// RGB visualization of a flow field, values in `[0,1]`, `[3,H,W]` planar.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowColorCode {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FlowColorCode {
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        (0..plane)
            .flat_map(|i| (0..3).map(move |c| (c, i)))
            .map(|(c, i)| unit_to_u8(self.data[c * plane + i]))
            .collect()
    }
}

/// Normalization used by [`flow_to_color`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaxMagnitude {
    /// Normalize by the largest magnitude in the field.
    Auto,
    Fixed(f64),
}

// Middlebury color wheel segment lengths: RY, YG, GC, CB, BM, MR.
const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn color_wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let mut wheel = Vec::with_capacity(ry + yg + gc + cb + bm + mr);
    for i in 0..ry {
        wheel.push([1.0, i as f64 / ry as f64, 0.0]);
    }
    for i in 0..yg {
        wheel.push([1.0 - i as f64 / yg as f64, 1.0, 0.0]);
    }
    for i in 0..gc {
        wheel.push([0.0, 1.0, i as f64 / gc as f64]);
    }
    for i in 0..cb {
        wheel.push([0.0, 1.0 - i as f64 / cb as f64, 1.0]);
    }
    for i in 0..bm {
        wheel.push([i as f64 / bm as f64, 0.0, 1.0]);
    }
    for i in 0..mr {
        wheel.push([1.0, 0.0, 1.0 - i as f64 / mr as f64]);
    }
    wheel
}

/// Middlebury color coding: direction picks the hue, magnitude the saturation.
///
/// Zero flow is white; magnitudes at or above the normalizer are fully saturated.
pub fn flow_to_color(f: &FlowField, max_magnitude: MaxMagnitude) -> Result<FlowColorCode> {
    let mag = flow_magnitude(f)?;
    let norm = match max_magnitude {
        MaxMagnitude::Fixed(m) => {
            ensure!(
                m > 0.0 && m.is_finite(),
                "max_magnitude must be positive, got {m}"
            );
            m
        }
        MaxMagnitude::Auto => mag.data.iter().copied().fold(0.0, f64::max),
    };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let plane = f.height * f.width;
    let mut data = vec![1.0; 3 * plane];
    for i in 0..plane {
        if mag.data[i] == 0.0 || norm == 0.0 {
            continue;
        }
        let rad = (mag.data[i] / norm).min(1.0);
        let angle = (-f.v[i]).atan2(-f.u[i]) / std::f64::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let t = fk - k0 as f64;
        for c in 0..3 {
            let col = (1.0 - t) * wheel[k0][c] + t * wheel[k1][c];
            data[c * plane + i] = 1.0 - rad * (1.0 - col);
        }
    }
    Ok(FlowColorCode {
        height: f.height,
        width: f.width,
        data,
    })
}

/// Thresholds a mask: 1 where `value >= threshold`, else 0.
pub fn binarize(m: &ChangeMask, threshold: f64) -> Result<ChangeMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation(format!(
            "threshold must lie in (0,1), got {threshold}"
        )));
    }
    Ok(ChangeMask {
        height: m.height,
        width: m.width,
        data: m
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect(),
        kind: MaskKind::GroundTruth,
    })
}
