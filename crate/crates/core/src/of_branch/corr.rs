//! All-pairs correlation, its pooled pyramid and windowed lookup.

use crate::domain::FlowField;
use crate::error::{ensure, Result};
use crate::nn::kernels;
use crate::tensor::Tensor;

use super::FeatureMap;

/// Number of pyramid levels.
pub const PYRAMID_LEVELS: usize = 4;

/// 4D volume stored as `[H·W, H, W]`: one target map per source pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrVolume {
    pub height: usize,
    pub width: usize,
    pub data: Tensor,
}

impl CorrVolume {
    /// Entry `C[i,j,k,l]` for source `(i,j)` and target `(k,l)`.
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data.at3(i * self.width + j, k, l)
    }
}

/// Inner products of all feature pairs, scaled by `1/√C`.
pub fn correlation_volume(f0: &FeatureMap, f1: &FeatureMap) -> Result<CorrVolume> {
    ensure!(
        f0.data.shape() == f1.data.shape(),
        "feature maps differ in shape: {:?} vs {:?}",
        f0.data.shape(),
        f1.data.shape()
    );
    let (c, h, w) = f0.data.chw();
    Ok(CorrVolume {
        height: h,
        width: w,
        data: kernels::correlation(&f0.data, &f1.data, corr_scale(c)),
    })
}

pub(crate) fn corr_scale(channels: usize) -> f64 {
    1.0 / (channels as f64).sqrt()
}

/// Four levels; level `k` averages `2^k × 2^k` target blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationPyramid {
    pub levels: Vec<Tensor>,
}

pub(crate) fn check_pyramid_size(h: usize, w: usize) -> Result<()> {
    let min = 1 << (PYRAMID_LEVELS - 1);
    ensure!(
        h >= min && w >= min,
        "correlation target dims {h}x{w} are smaller than {min}; cannot build {PYRAMID_LEVELS} levels"
    );
    Ok(())
}

pub fn build_pyramid(corr: &CorrVolume) -> Result<CorrelationPyramid> {
    check_pyramid_size(corr.height, corr.width)?;
    let mut levels = vec![corr.data.clone()];
    for _ in 1..PYRAMID_LEVELS {
        let next = kernels::avg_pool(levels.last().unwrap(), 2);
        levels.push(next);
    }
    Ok(CorrelationPyramid { levels })
}

/// Pixel grid plus flow, `[2,H,W]` (x then y).
pub(crate) fn displaced_coords(flow: &Tensor) -> Tensor {
    let (_, h, w) = flow.chw();
    let mut c = flow.clone();
    let d = c.data_mut();
    for y in 0..h {
        for x in 0..w {
            d[y * w + x] += x as f64;
            d[h * w + y * w + x] += y as f64;
        }
    }
    c
}

/// Windowed bilinear samples around each flow-displaced position on every level.
///
/// Output is `[4·(2r+1)², H, W]`; out-of-volume samples clamp to the border.
pub fn lookup(pyr: &CorrelationPyramid, flow: &FlowField, radius: usize) -> Result<Tensor> {
    ensure!(radius >= 1, "lookup radius must be at least 1");
    let n = pyr.levels[0].shape()[0];
    ensure!(
        n == flow.height() * flow.width(),
        "flow {}x{} does not match the pyramid's {n} source pixels",
        flow.width(),
        flow.height()
    );
    let coords = displaced_coords(&flow.to_tensor());
    let levels: Vec<&Tensor> = pyr.levels.iter().collect();
    Ok(kernels::lookup(&levels, &coords, radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feature_map(c: usize, h: usize, w: usize, vals: &[f64]) -> FeatureMap {
        FeatureMap {
            data: Tensor::from_vec(&[c, h, w], vals[..c * h * w].to_vec()),
        }
    }

    proptest! {
        #[test]
        fn volume_matches_quadruple_loop(
            c in 1usize..=8, h in 1usize..=6, w in 1usize..=6,
            a in prop::collection::vec(-2.0f64..2.0, 288),
            b in prop::collection::vec(-2.0f64..2.0, 288),
        ) {
            let f0 = feature_map(c, h, w, &a);
            let f1 = feature_map(c, h, w, &b);
            let vol = correlation_volume(&f0, &f1).unwrap();
            for i in 0..h { for j in 0..w { for k in 0..h { for l in 0..w {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += f0.data.at3(ch, i, j) * f1.data.at3(ch, k, l);
                }
                let want = dot / (c as f64).sqrt();
                prop_assert!((vol.get(i, j, k, l) - want).abs() <= 1e-5);
            }}}}
        }
    }

    #[test]
    fn pyramid_halves_target_dims() {
        let f = feature_map(2, 8, 8, &(0..128).map(|i| (i as f64 * 0.1).sin()).collect::<Vec<_>>());
        let pyr = build_pyramid(&correlation_volume(&f, &f).unwrap()).unwrap();
        let dims: Vec<_> = pyr.levels.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(dims, vec![vec![64, 8, 8], vec![64, 4, 4], vec![64, 2, 2], vec![64, 1, 1]]);
        // coarsest level is the mean of each full target map
        let p = 13;
        let mean = pyr.levels[0].plane(p).iter().sum::<f64>() / 64.0;
        assert!((pyr.levels[3].plane(p)[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn small_volume_is_rejected() {
        let f = feature_map(1, 4, 4, &[1.0; 16]);
        assert!(build_pyramid(&correlation_volume(&f, &f).unwrap()).is_err());
    }

    #[test]
    fn zero_flow_window_center_is_self_correlation() {
        let vals: Vec<f64> = (0..3 * 8 * 8).map(|i| ((i * 17 % 23) as f64) / 23.0).collect();
        let f0 = feature_map(3, 8, 8, &vals);
        let f1 = feature_map(3, 8, 8, &vals.iter().rev().copied().collect::<Vec<_>>());
        let vol = correlation_volume(&f0, &f1).unwrap();
        let pyr = build_pyramid(&vol).unwrap();
        let r = 2;
        let out = lookup(&pyr, &FlowField::zeros(8, 8), r).unwrap();
        assert_eq!(out.shape(), [PYRAMID_LEVELS * 25, 8, 8]);
        let center = 12;
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(out.at3(center, i, j), vol.get(i, j, i, j));
                // one step right in the window
                if j + 1 < 8 {
                    assert_eq!(out.at3(center + 1, i, j), vol.get(i, j, i, j + 1));
                }
            }
        }
    }

    #[test]
    fn lookup_checks_flow_size() {
        let f = feature_map(1, 8, 8, &[1.0; 64]);
        let pyr = build_pyramid(&correlation_volume(&f, &f).unwrap()).unwrap();
        assert!(lookup(&pyr, &FlowField::zeros(4, 4), 1).is_err());
        assert!(lookup(&pyr, &FlowField::zeros(8, 8), 0).is_err());
    }
}
