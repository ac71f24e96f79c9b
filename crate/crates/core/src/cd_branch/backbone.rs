//! Stride-8 dilated residual backbones for the difference image.

use serde::{Deserialize, Serialize};

use crate::nn::layers::{BasicBlock, Bottleneck, ConvNormRelu};
use crate::nn::{ConvGeom, Graph, ParamBuilder, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Four basic-block stages, widths 16/32/48/64.
    Toy,
    /// Bottleneck stages `[3, 4, 6, 3]`, last two dilated by 2 and 4.
    #[serde(alias = "resnet50-style")]
    Resnet50,
}

impl BackboneKind {
    pub fn out_channels(self) -> usize {
        match self {
            BackboneKind::Toy => TOY_WIDTHS[3],
            BackboneKind::Resnet50 => RESNET_WIDTHS[3] * Bottleneck::EXPANSION,
        }
    }
}

const TOY_WIDTHS: [usize; 4] = [16, 32, 48, 64];
const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const RESNET_DEPTHS: [usize; 4] = [3, 4, 6, 3];

#[derive(Clone, Debug)]
enum Block {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub kind: BackboneKind,
    stem: ConvNormRelu,
    /// Extra stride-2 average pool after the stem (ResNet layout).
    stem_pool: bool,
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, kind: BackboneKind, groups: usize) -> Self {
        match kind {
            BackboneKind::Toy => {
                let stem = ConvNormRelu::new(pb, "stem", 3, TOY_WIDTHS[0], ConvGeom::same(3, 2, 1), groups);
                let layout = [(1, 1), (2, 1), (2, 1), (1, 2)];
                let mut cin = TOY_WIDTHS[0];
                let blocks = layout
                    .iter()
                    .zip(TOY_WIDTHS)
                    .enumerate()
                    .map(|(i, (&(stride, dilation), width))| {
                        let b = BasicBlock::new(
                            pb,
                            &format!("layer{}.0", i + 1),
                            cin,
                            width,
                            stride,
                            dilation,
                            groups,
                        );
                        cin = width;
                        Block::Basic(b)
                    })
                    .collect();
                Backbone {
                    kind,
                    stem,
                    stem_pool: false,
                    blocks,
                }
            }
            BackboneKind::Resnet50 => {
                let stem = ConvNormRelu::new(pb, "stem", 3, 64, ConvGeom::same(7, 2, 1), groups);
                let layout = [(1, 1), (2, 1), (1, 2), (1, 4)];
                let mut cin = 64;
                let mut blocks = Vec::new();
                for (i, ((&(stride, dilation), width), depth)) in
                    layout.iter().zip(RESNET_WIDTHS).zip(RESNET_DEPTHS).enumerate()
                {
                    for b in 0..depth {
                        let s = if b == 0 { stride } else { 1 };
                        blocks.push(Block::Bottleneck(Bottleneck::new(
                            pb,
                            &format!("layer{}.{b}", i + 1),
                            cin,
                            width,
                            s,
                            dilation,
                            groups,
                        )));
                        cin = width * Bottleneck::EXPANSION;
                    }
                }
                Backbone {
                    kind,
                    stem,
                    stem_pool: true,
                    blocks,
                }
            }
        }
    }

    /// `[3,H,W]` → `[C,H/8,W/8]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let mut y = self.stem.forward(g, ps, x);
        if self.stem_pool {
            y = g.avg_pool(y, 2);
        }
        for block in &self.blocks {
            y = match block {
                Block::Basic(b) => b.forward(g, ps, y),
                Block::Bottleneck(b) => b.forward(g, ps, y),
            };
        }
        y
    }

    pub fn out_channels(&self) -> usize {
        self.kind.out_channels()
    }
}
