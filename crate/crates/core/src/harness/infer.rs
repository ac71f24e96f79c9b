//! Inference on an arbitrary image pair.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{binarize, flow_to_color, Image, MaxMagnitude};
use crate::error::{ensure, Result};
use crate::forge::io::{read_rgb8, write_flo, write_gray8, write_mask_png};

use super::config::BranchSelector;
use super::model::JointNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutputs {
    pub flow_color: PathBuf,
    pub flow: PathBuf,
    pub change: PathBuf,
    pub change_probability: PathBuf,
    /// Size after cropping, when the inputs were not multiples of 8.
    pub cropped_to: Option<(usize, usize)>,
}

/// Loads an RGB image, center-cropping to multiples of 8.
pub fn load_for_inference(path: &Path) -> Result<(Image, bool)> {
    let (h, w, bytes) = read_rgb8(path)?;
    let (ch, cw) = (h / 8 * 8, w / 8 * 8);
    ensure!(
        ch >= Image::MIN_SIDE && cw >= Image::MIN_SIDE,
        "{} is too small ({w}x{h})",
        path.display()
    );
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let mut out = Vec::with_capacity(ch * cw * 3);
    for y in oy..oy + ch {
        out.extend_from_slice(&bytes[(y * w + ox) * 3..(y * w + ox + cw) * 3]);
    }
    let cropped = (ch, cw) != (h, w);
    if cropped {
        log::warn!("{}: center-cropped {w}x{h} to {cw}x{ch}", path.display());
    }
    Ok((Image::from_rgb8(ch, cw, &out)?, cropped))
}

/// Writes `flow.png`, `flow.flo`, `change.png` (binary) and `change_prob.png`.
pub fn infer_pair(
    model: &JointNet,
    t0_path: &Path,
    t1_path: &Path,
    out_dir: &Path,
    threshold: f64,
) -> Result<InferOutputs> {
    let (t0, c0) = load_for_inference(t0_path)?;
    let (t1, c1) = load_for_inference(t1_path)?;
    ensure!(
        t0.height() == t1.height() && t0.width() == t1.width(),
        "image sizes differ: {} vs {}",
        t0_path.display(),
        t1_path.display()
    );
    let pred = model.predict_pair(&t0, &t1, BranchSelector::Both)?;
    let flow = pred.flow.expect("both branches predict flow");
    let change = pred.change.expect("both branches predict change");
    crate::forge::io::create_dir(out_dir)?;
    let out = InferOutputs {
        flow_color: out_dir.join("flow.png"),
        flow: out_dir.join("flow.flo"),
        change: out_dir.join("change.png"),
        change_probability: out_dir.join("change_prob.png"),
        cropped_to: (c0 || c1).then_some((t0.width(), t0.height())),
    };
    let color = flow_to_color(&flow, MaxMagnitude::Auto)?;
    crate::forge::io::write_png_rgb(&out.flow_color, &color.to_image())?;
    write_flo(&out.flow, &flow)?;
    write_mask_png(&out.change, &binarize(&change, threshold)?)?;
    write_gray8(&out.change_probability, change.height(), change.width(), change.to_gray8())?;
    Ok(out)
}
