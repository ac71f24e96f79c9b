//! Side-by-side panels: first frame, second frame, flow color, change mask.

use std::path::Path;

use crate::domain::{flow_to_color, ChangeMask, FlowField, Image, MaxMagnitude};
use crate::error::{ensure, Result};
use crate::forge::io::write_png_rgb;

/// Panel `H × 4W`.
pub fn panel(t0: &Image, t1: &Image, flow: &FlowField, change: &ChangeMask, max: MaxMagnitude) -> Result<Image> {
    let (h, w) = (t0.height(), t0.width());
    ensure!(
        t1.height() == h && t1.width() == w,
        "frames differ in shape"
    );
    ensure!(
        flow.height() == h && flow.width() == w && change.height() == h && change.width() == w,
        "flow / change shapes do not match the frames"
    );
    let color = flow_to_color(flow, max)?.to_image();
    Image::from_fn(h, 4 * w, |y, x| {
        let (tile, tx) = (x / w, x % w);
        match tile {
            0 => [0, 1, 2].map(|c| t0.get(y, tx, c)),
            1 => [0, 1, 2].map(|c| t1.get(y, tx, c)),
            2 => [0, 1, 2].map(|c| color.get(y, tx, c)),
            _ => [change.get(y, tx); 3],
        }
    })
}

pub fn write_panel(
    path: &Path,
    t0: &Image,
    t1: &Image,
    flow: &FlowField,
    change: &ChangeMask,
) -> Result<()> {
    write_png_rgb(path, &panel(t0, t1, flow, change, MaxMagnitude::Auto)?)
}
