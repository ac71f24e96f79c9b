//! Change detection branch.
//!
//! The second frame is warped into the first frame's geometry with the
//! estimated flow, the absolute difference to the first frame is gated by a
//! flow-magnitude mask that silences slowly moving regions, and a dilated
//! residual backbone plus a four-bin pyramid pooling head turns it into a
//! per-pixel change probability.

mod backbone;

pub use backbone::{Backbone, BackboneKind};

use serde::{Deserialize, Serialize};

use crate::domain::{flow_magnitude, ChangeMask, FlowField, Image, MaskKind};
use crate::error::{ensure, Result};
use crate::nn::layers::{Conv2d, ConvNormRelu};
use crate::nn::{kernels, ConvGeom, Graph, ParamBuilder, ParamStore, Var};
use crate::of_branch::STRIDE;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `0` where `|f| > τ`, `1` elsewhere.
    Hard,
    /// `σ((τ − |f|)/softness)`.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdConfig {
    pub backbone: BackboneKind,
    pub pool_bins: Vec<usize>,
    pub fusion_channels: usize,
    /// `τ` in pixels.
    pub mask_threshold: f64,
    pub mask_mode: MaskMode,
    /// Transition width of the soft mask, pixels.
    pub mask_softness: f64,
    pub sigmoid_threshold: f64,
    pub norm_groups: usize,
}

impl CdConfig {
    pub fn toy() -> Self {
        CdConfig {
            backbone: BackboneKind::Toy,
            pool_bins: vec![1, 2, 3, 6],
            fusion_channels: 64,
            mask_threshold: 1.0,
            mask_mode: MaskMode::Hard,
            mask_softness: 0.25,
            sigmoid_threshold: 0.5,
            norm_groups: 4,
        }
    }

    pub fn full() -> Self {
        CdConfig {
            backbone: BackboneKind::Resnet50,
            fusion_channels: 512,
            norm_groups: 32,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.pool_bins.len() == 4,
            "exactly 4 pool bins required, got {}",
            self.pool_bins.len()
        );
        ensure!(self.pool_bins.iter().all(|&b| b >= 1), "pool bins must be positive");
        ensure!(
            self.mask_threshold >= 0.0 && self.mask_threshold.is_finite(),
            "mask threshold must be a finite value >= 0"
        );
        ensure!(self.mask_softness > 0.0, "mask softness must be positive");
        ensure!(
            self.sigmoid_threshold > 0.0 && self.sigmoid_threshold < 1.0,
            "sigmoid threshold must lie in (0,1)"
        );
        ensure!(self.fusion_channels > 0, "fusion channels must be positive");
        Ok(())
    }
}

/// Non-negative per-channel difference image `[3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffMap {
    pub data: Tensor,
}

fn check_flow(img: &Image, flow: &FlowField) -> Result<()> {
    ensure!(
        flow.height() == img.height() && flow.width() == img.width(),
        "flow {}x{} does not match image {}x{}",
        flow.width(),
        flow.height(),
        img.width(),
        img.height()
    );
    Ok(())
}

/// Backward warp: output `(x,y)` samples `img` at `(x+u, y+v)`, clamped at the border.
pub fn warp(img: &Image, flow: &FlowField) -> Result<Image> {
    check_flow(img, flow)?;
    Image::from_tensor(&kernels::warp(&img.to_tensor(), &flow.to_tensor()))
}

pub fn abs_difference(t0: &Image, warped: &Image) -> Result<DiffMap> {
    ensure!(
        t0.height() == warped.height() && t0.width() == warped.width(),
        "difference of images with different shapes"
    );
    let data = t0.to_tensor().zip_map(&warped.to_tensor(), |a, b| (a - b).abs());
    Ok(DiffMap { data })
}

/// Multiplier `[1,H,W]` that silences slowly moving regions.
pub fn mask_values(flow: &Tensor, threshold: f64, mode: MaskMode, softness: f64) -> Tensor {
    let (_, h, w) = flow.chw();
    let hw = h * w;
    let data = (0..hw)
        .map(|i| {
            let m = flow.data()[i].hypot(flow.data()[hw + i]);
            match mode {
                MaskMode::Hard => {
                    if m > threshold {
                        0.0
                    } else {
                        1.0
                    }
                }
                MaskMode::Soft => crate::nn::graph::sigmoid((threshold - m) / softness),
            }
        })
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Binary multiplier: `0` where `|flow| > τ`, else `1`.
pub fn slow_change_mask(flow: &FlowField, tau: f64) -> Result<ChangeMask> {
    ensure!(tau >= 0.0, "mask threshold must be >= 0, got {tau}");
    let mag = flow_magnitude(flow)?;
    let data = mag.data.iter().map(|&m| if m > tau { 0.0 } else { 1.0 }).collect();
    ChangeMask::new(flow.height(), flow.width(), data, MaskKind::GroundTruth)
}

/// Pyramid pooling head: four pooled views of `F₀` upsampled back and fused.
#[derive(Clone, Debug)]
pub struct PyramidHead {
    pub bins: Vec<usize>,
    fuse: ConvNormRelu,
    classify: Conv2d,
}

impl PyramidHead {
    pub fn new(pb: &mut ParamBuilder, cfg: &CdConfig, in_channels: usize) -> Self {
        let cat = in_channels * (cfg.pool_bins.len() + 1);
        PyramidHead {
            bins: cfg.pool_bins.clone(),
            fuse: ConvNormRelu::new(
                pb,
                "fuse",
                cat,
                cfg.fusion_channels,
                ConvGeom::same(3, 1, 1),
                cfg.norm_groups,
            ),
            classify: Conv2d::new(pb, "classify", cfg.fusion_channels, 1, ConvGeom::same(3, 1, 1)),
        }
    }

    /// `F₁..F₄`, each upsampled to `F₀`'s resolution.
    pub fn pooled(&self, g: &mut Graph, f0: Var) -> Vec<Var> {
        let (_, h, w) = g.value(f0).chw();
        self.bins
            .iter()
            .map(|&b| {
                let p = g.adaptive_avg_pool(f0, b);
                g.upsample_bilinear(p, h, w)
            })
            .collect()
    }

    /// Change logits at `out_h × out_w`.
    pub fn logits(&self, g: &mut Graph, ps: &ParamStore, f0: Var, out_h: usize, out_w: usize) -> Var {
        let mut parts = vec![f0];
        parts.extend(self.pooled(g, f0));
        let cat = g.concat(&parts);
        let f5 = self.fuse.forward(g, ps, cat);
        let f6 = self.classify.forward(g, ps, f5);
        g.upsample_bilinear(f6, out_h, out_w)
    }

    /// Change probabilities `[1,out_h,out_w]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f0: Var, out_h: usize, out_w: usize) -> Var {
        let l = self.logits(g, ps, f0, out_h, out_w);
        g.sigmoid(l)
    }
}

#[derive(Clone, Debug)]
pub struct CdBranch {
    pub config: CdConfig,
    pub backbone: Backbone,
    pub head: PyramidHead,
}

impl CdBranch {
    pub fn new(pb: &mut ParamBuilder, config: CdConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(&mut pb.sub("backbone"), config.backbone, config.norm_groups);
        let head = PyramidHead::new(&mut pb.sub("head"), &config, backbone.out_channels());
        Ok(CdBranch {
            config,
            backbone,
            head,
        })
    }

    /// Masked difference image on the graph. The mask is computed from the
    /// current flow value and enters as a constant.
    pub fn masked_difference(&self, g: &mut Graph, t0: Var, t1: Var, flow: Var) -> Var {
        let warped = g.warp(t1, flow);
        let d = g.sub(t0, warped);
        let d = g.abs(d);
        let c = &self.config;
        let mask = mask_values(g.value(flow), c.mask_threshold, c.mask_mode, c.mask_softness);
        g.mul_const(d, mask)
    }

    /// Probability map `[1,H,W]` for `t0`, `t1` `[3,H,W]` and flow `[2,H,W]`.
    pub fn forward_graph(&self, g: &mut Graph, ps: &ParamStore, t0: Var, t1: Var, flow: Var) -> Var {
        let (_, h, w) = g.value(t0).chw();
        let x = self.masked_difference(g, t0, t1, flow);
        let f0 = self.backbone.forward(g, ps, x);
        self.head.forward(g, ps, f0, h, w)
    }

    /// Stride-8 features `F₀` of a (masked) difference map.
    pub fn backbone_features(&self, ps: &ParamStore, diff: &DiffMap) -> Result<Tensor> {
        let (c, h, w) = diff.data.chw();
        ensure!(c == 3, "difference map must have 3 channels");
        ensure!(
            h % STRIDE == 0 && w % STRIDE == 0,
            "difference map {w}x{h} must have dimensions divisible by {STRIDE}"
        );
        let mut g = Graph::inference();
        let x = g.constant(diff.data.clone());
        let f = self.backbone.forward(&mut g, ps, x);
        Ok(g.value(f).clone())
    }

    /// `output₂` at `out_h × out_w` from backbone features.
    pub fn pyramid_head(&self, ps: &ParamStore, f0: &Tensor, out_h: usize, out_w: usize) -> Result<ChangeMask> {
        ensure!(
            f0.shape().len() == 3 && f0.shape()[0] == self.backbone.out_channels(),
            "feature map shape {:?} does not match the backbone",
            f0.shape()
        );
        let mut g = Graph::inference();
        let x = g.constant(f0.clone());
        let p = self.head.forward(&mut g, ps, x, out_h, out_w);
        ChangeMask::new(out_h, out_w, g.value(p).data().to_vec(), MaskKind::Prediction)
    }

    /// warp → difference → slow-change mask → backbone → head.
    pub fn forward(&self, ps: &ParamStore, t0: &Image, t1: &Image, flow: &FlowField) -> Result<ChangeMask> {
        ensure!(
            t0.height() == t1.height() && t0.width() == t1.width(),
            "frame shapes differ: {}x{} vs {}x{}",
            t0.width(),
            t0.height(),
            t1.width(),
            t1.height()
        );
        check_flow(t0, flow)?;
        let mut g = Graph::inference();
        let a = g.constant(t0.to_tensor());
        let b = g.constant(t1.to_tensor());
        let f = g.constant(flow.to_tensor());
        let p = self.forward_graph(&mut g, ps, a, b, f);
        ChangeMask::new(t0.height(), t0.width(), g.value(p).data().to_vec(), MaskKind::Prediction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_rng;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    // Tent-kernel form of bilinear sampling on the clamped coordinate.
    fn oracle_sample(img: &Image, c: usize, x: f64, y: f64) -> f64 {
        let (h, w) = (img.height(), img.width());
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let mut acc = 0.0;
        for j in 0..h {
            let wy = (1.0 - (y - j as f64).abs()).max(0.0);
            if wy == 0.0 {
                continue;
            }
            for i in 0..w {
                let wx = (1.0 - (x - i as f64).abs()).max(0.0);
                acc += wx * wy * img.get(j, i, c);
            }
        }
        acc
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn zero_flow_is_identity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 16, 24);
            let out = warp(&img, &FlowField::zeros(16, 24)).unwrap();
            prop_assert_eq!(out, img);
        }

        #[test]
        fn warp_matches_scalar_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 16, 16);
            let flow = FlowField::from_fn(16, 16, |_, _| {
                (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))
            }).unwrap();
            let out = warp(&img, &flow).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let (u, v) = flow.at(y, x);
                    for c in 0..3 {
                        let want = oracle_sample(&img, c, x as f64 + u, y as f64 + v);
                        prop_assert!((out.get(y, x, c) - want).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn integer_shift_reads_neighbor() {
        let img = Image::from_fn(16, 16, |y, x| [x as f64 / 15.0, y as f64 / 15.0, 0.5]).unwrap();
        let out = warp(&img, &FlowField::constant(16, 16, 2.0, -1.0)).unwrap();
        assert_eq!(out.get(5, 3, 0), img.get(4, 5, 0));
        assert_eq!(out.get(5, 3, 1), img.get(4, 5, 1));
        // past the right edge the border column repeats
        assert_eq!(out.get(5, 15, 0), img.get(4, 15, 0));
        assert_eq!(out.get(0, 0, 1), img.get(0, 2, 1));
    }

    #[test]
    fn warp_rejects_mismatched_flow() {
        let img = Image::filled(16, 16, [0.1; 3]).unwrap();
        assert!(warp(&img, &FlowField::zeros(8, 16)).is_err());
    }

    #[test]
    fn difference_of_constants() {
        let a = Image::filled(16, 16, [0.2; 3]).unwrap();
        let b = Image::filled(16, 16, [0.7; 3]).unwrap();
        let d = abs_difference(&a, &b).unwrap();
        assert!(d.data.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert_eq!(abs_difference(&b, &a).unwrap(), d);
    }

    #[test]
    fn hard_mask_is_strict_above_threshold() {
        let flow = FlowField::new(1, 4, vec![0.0, 1.0, 0.6, 3.0], vec![0.0, 0.0, 0.8, 0.0]).unwrap();
        let m = slow_change_mask(&flow, 1.0).unwrap();
        // |(0.6,0.8)| rounds to a hair above 1 in f64, so check the others
        assert_eq!(m.data()[0], 1.0);
        assert_eq!(m.data()[1], 1.0);
        assert_eq!(m.data()[3], 0.0);
        let t = mask_values(&flow.to_tensor(), 1.0, MaskMode::Hard, 0.25);
        assert_eq!(t.data(), m.data());
        assert!(slow_change_mask(&flow, -0.1).is_err());
    }

    #[test]
    fn soft_mask_is_half_at_threshold() {
        let flow = FlowField::new(1, 3, vec![1.0, 0.0, 5.0], vec![0.0, 0.0, 0.0]).unwrap();
        let t = mask_values(&flow.to_tensor(), 1.0, MaskMode::Soft, 0.25);
        assert!((t.data()[0] - 0.5).abs() < 1e-12);
        assert!(t.data()[1] > 0.98);
        assert!(t.data()[2] < 1e-6);
    }

    #[test]
    fn config_needs_four_bins() {
        let mut c = CdConfig::toy();
        assert!(c.validate().is_ok());
        c.pool_bins = vec![1, 2, 3];
        assert!(c.validate().is_err());
        let mut c = CdConfig::toy();
        c.sigmoid_threshold = 1.0;
        assert!(c.validate().is_err());
    }

    fn toy_branch() -> (CdBranch, ParamStore) {
        let mut ps = ParamStore::new();
        let mut rng = init_rng(5);
        let cd = CdBranch::new(&mut ParamBuilder::new(&mut ps, &mut rng), CdConfig::toy()).unwrap();
        (cd, ps)
    }

    #[test]
    fn toy_backbone_is_stride_eight() {
        let (cd, ps) = toy_branch();
        let diff = DiffMap {
            data: Tensor::full(&[3, 32, 24], 0.3),
        };
        let f = cd.backbone_features(&ps, &diff).unwrap();
        assert_eq!(f.shape(), [64, 4, 3]);
        let bad = DiffMap {
            data: Tensor::full(&[3, 30, 24], 0.3),
        };
        assert!(cd.backbone_features(&ps, &bad).is_err());
    }

    #[test]
    fn resnet_backbone_is_stride_eight() {
        let mut ps = ParamStore::new();
        let mut rng = init_rng(1);
        let cd = CdBranch::new(&mut ParamBuilder::new(&mut ps, &mut rng), CdConfig::full()).unwrap();
        let diff = DiffMap {
            data: Tensor::full(&[3, 16, 16], 0.3),
        };
        let f = cd.backbone_features(&ps, &diff).unwrap();
        assert_eq!(f.shape(), [2048, 2, 2]);
    }

    #[test]
    fn pooled_views_of_constant_features_are_constant() {
        let (cd, _) = toy_branch();
        let mut g = Graph::inference();
        let f0 = g.constant(Tensor::full(&[64, 6, 6], 0.7));
        let views = cd.head.pooled(&mut g, f0);
        assert_eq!(views.len(), 4);
        for v in views {
            assert_eq!(g.value(v).shape(), [64, 6, 6]);
            assert!(g.value(v).data().iter().all(|x| (x - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn head_outputs_probabilities_at_requested_size() {
        let (cd, ps) = toy_branch();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f0 = Tensor::from_vec(&[64, 3, 3], (0..576).map(|_| rng.random_range(0.0..1.0)).collect());
        let m = cd.pyramid_head(&ps, &f0, 24, 24).unwrap();
        assert_eq!((m.height(), m.width()), (24, 24));
        assert!(m.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(cd.pyramid_head(&ps, &Tensor::zeros(&[32, 3, 3]), 24, 24).is_err());
    }

    #[test]
    fn moving_region_is_silenced() {
        let (cd, _) = toy_branch();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t0 = random_image(&mut rng, 16, 16);
        let t1 = random_image(&mut rng, 16, 16);
        let flow = FlowField::from_fn(16, 16, |_, x| if x < 8 { (3.0, 0.0) } else { (0.0, 0.0) }).unwrap();
        let mut g = Graph::inference();
        let (a, b, f) = (
            g.constant(t0.to_tensor()),
            g.constant(t1.to_tensor()),
            g.constant(flow.to_tensor()),
        );
        let d = cd.masked_difference(&mut g, a, b, f);
        let d = g.value(d);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let want = if x < 8 { 0.0 } else { (t0.get(y, x, c) - t1.get(y, x, c)).abs() };
                    assert_eq!(d.at3(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn identical_frames_give_identical_maps() {
        let (cd, ps) = toy_branch();
        let t = Image::filled(16, 16, [0.4; 3]).unwrap();
        let a = cd.forward(&ps, &t, &t, &FlowField::zeros(16, 16)).unwrap();
        let b = cd.forward(&ps, &t, &t, &FlowField::constant(16, 16, 5.0, 0.0)).unwrap();
        // zero difference image either way
        assert_eq!(a, b);
        assert_eq!(a.kind(), MaskKind::Prediction);
    }
}
