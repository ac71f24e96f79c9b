//! Inference timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::Image;
use crate::error::{ensure, Result};

use super::config::BranchSelector;
use super::model::JointNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Timed forward passes.
    pub pairs: usize,
    pub warmup: usize,
    pub mean_seconds: f64,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub device: String,
}

pub fn device_descriptor() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("cpu {} ({threads} threads)", std::env::consts::ARCH)
}

/// Runs `warmup` untimed and then `pairs` timed full forward passes.
pub fn bench(model: &JointNet, t0: &Image, t1: &Image, pairs: usize, warmup: usize) -> Result<BenchReport> {
    ensure!(pairs >= 1, "need at least one timed pair");
    for _ in 0..warmup {
        model.predict_pair(t0, t1, BranchSelector::Both)?;
    }
    let mut total = 0.0;
    for _ in 0..pairs {
        let start = Instant::now();
        let out = model.predict_pair(t0, t1, BranchSelector::Both)?;
        total += start.elapsed().as_secs_f64();
        std::hint::black_box(out);
    }
    let mean_seconds = total / pairs as f64;
    Ok(BenchReport {
        pairs,
        warmup,
        mean_seconds,
        fps: 1.0 / mean_seconds,
        height: t0.height(),
        width: t0.width(),
        device: device_descriptor(),
    })
}
