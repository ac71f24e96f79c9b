use serde::{Deserialize, Serialize};

use crate::nn::layers::{BasicBlock, Conv2d, ConvNormRelu};
use crate::nn::{ConvGeom, Graph, ParamBuilder, ParamStore, Var};

/// Residual encoder layout shared by the feature and context encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayout {
    /// Widths of the three residual stages (strides 1, 2, 2 after a stride-2 stem).
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub stem_kernel: usize,
    pub norm_groups: usize,
}

/// Stride-8 residual encoder: stem, three stages, 1×1 projection.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: ConvNormRelu,
    stages: Vec<BasicBlock>,
    proj: Conv2d,
    pub out_channels: usize,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, layout: &EncoderLayout, out_channels: usize) -> Self {
        let [w1, w2, w3] = layout.widths;
        let g = layout.norm_groups;
        let stem = ConvNormRelu::new(
            pb,
            "stem",
            3,
            w1,
            ConvGeom::same(layout.stem_kernel, 2, 1),
            g,
        );
        let mut stages = Vec::new();
        let mut cin = w1;
        for (si, (width, stride)) in [(w1, 1), (w2, 2), (w3, 2)].into_iter().enumerate() {
            for b in 0..layout.blocks_per_stage.max(1) {
                let s = if b == 0 { stride } else { 1 };
                stages.push(BasicBlock::new(
                    pb,
                    &format!("layer{}.{b}", si + 1),
                    cin,
                    width,
                    s,
                    1,
                    g,
                ));
                cin = width;
            }
        }
        let proj = Conv2d::new(pb, "proj", w3, out_channels, ConvGeom::new(1, 1, 0, 1));
        Encoder {
            stem,
            stages,
            proj,
            out_channels,
        }
    }

    /// `x: [3,H,W]` in `[0,1]` → `[C,H/8,W/8]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let x = g.scale(x, 2.0);
        let x = g.add_scalar(x, -1.0);
        let mut y = self.stem.forward(g, ps, x);
        for block in &self.stages {
            y = block.forward(g, ps, y);
        }
        self.proj.forward(g, ps, y)
    }
}
