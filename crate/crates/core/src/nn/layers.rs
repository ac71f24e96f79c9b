//! Parameterized building blocks: convolutions, group normalization and residual blocks.

use super::graph::{Graph, Var};
use super::kernels::ConvGeom;
use super::params::{ParamBuilder, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
    ) -> Self {
        Self::with_bias(pb, name, in_channels, out_channels, geom, true)
    }

    pub fn with_bias(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        Self::build(pb, name, in_channels, out_channels, geom, bias, 1.0)
    }

    /// Kaiming init shrunk by `gain`, for output layers that should start near zero.
    pub fn small(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        gain: f64,
    ) -> Self {
        Self::build(pb, name, in_channels, out_channels, geom, true, gain)
    }

    fn build(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
        gain: f64,
    ) -> Self {
        let mut s = pb.sub(name);
        let k = geom.kernel;
        let fan_in = in_channels * k * k;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let weight = s.normal("weight", &[out_channels, in_channels, k, k], std);
        let bias = bias.then(|| s.constant("bias", &[out_channels], 0.0));
        Conv2d {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.geom)
    }
}

/// Largest divisor of `channels` that does not exceed `target`.
pub fn groups_for(channels: usize, target: usize) -> usize {
    (1..=target.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        let mut s = pb.sub(name);
        GroupNorm {
            gamma: s.constant("gamma", &[channels], 1.0),
            beta: s.constant("beta", &[channels], 0.0),
            groups: groups_for(channels, groups),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// conv → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormRelu {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        groups: usize,
    ) -> Self {
        let mut s = pb.sub(name);
        ConvNormRelu {
            conv: Conv2d::with_bias(&mut s, "conv", cin, cout, geom, false),
            norm: GroupNorm::new(&mut s, "norm", cout, groups),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, ps, x);
        let y = self.norm.forward(g, ps, y);
        g.relu(y)
    }
}

/// Two 3×3 convolutions with an identity (or 1×1 projected) skip.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    down: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Self {
        let mut s = pb.sub(name);
        let conv1 =
            Conv2d::with_bias(&mut s, "conv1", cin, cout, ConvGeom::same(3, stride, dilation), false);
        let norm1 = GroupNorm::new(&mut s, "norm1", cout, groups);
        let conv2 =
            Conv2d::with_bias(&mut s, "conv2", cout, cout, ConvGeom::same(3, 1, dilation), false);
        let norm2 = GroupNorm::new(&mut s, "norm2", cout, groups);
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::with_bias(&mut s, "down", cin, cout, ConvGeom::new(1, stride, 0, 1), false),
                GroupNorm::new(&mut s, "down_norm", cout, groups),
            )
        });
        BasicBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            down,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let y = self.conv1.forward(g, ps, x);
        let y = self.norm1.forward(g, ps, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, ps, y);
        let y = self.norm2.forward(g, ps, y);
        let skip = match &self.down {
            Some((conv, norm)) => {
                let s = conv.forward(g, ps, x);
                norm.forward(g, ps, s)
            }
            None => x,
        };
        let out = g.add(y, skip);
        g.relu(out)
    }
}

/// 1×1 → 3×3 → 1×1 bottleneck with channel expansion 4.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    reduce: ConvNormRelu,
    spatial: ConvNormRelu,
    expand: Conv2d,
    norm: GroupNorm,
    down: Option<(Conv2d, GroupNorm)>,
}

impl Bottleneck {
    pub const EXPANSION: usize = 4;

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        width: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Self {
        let mut s = pb.sub(name);
        let cout = width * Self::EXPANSION;
        Bottleneck {
            reduce: ConvNormRelu::new(&mut s, "reduce", cin, width, ConvGeom::new(1, 1, 0, 1), groups),
            spatial: ConvNormRelu::new(
                &mut s,
                "spatial",
                width,
                width,
                ConvGeom::same(3, stride, dilation),
                groups,
            ),
            expand: Conv2d::with_bias(&mut s, "expand", width, cout, ConvGeom::new(1, 1, 0, 1), false),
            norm: GroupNorm::new(&mut s, "norm", cout, groups),
            down: (stride != 1 || cin != cout).then(|| {
                (
                    Conv2d::with_bias(&mut s, "down", cin, cout, ConvGeom::new(1, stride, 0, 1), false),
                    GroupNorm::new(&mut s, "down_norm", cout, groups),
                )
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let y = self.reduce.forward(g, ps, x);
        let y = self.spatial.forward(g, ps, y);
        let y = self.expand.forward(g, ps, y);
        let y = self.norm.forward(g, ps, y);
        let skip = match &self.down {
            Some((conv, norm)) => {
                let s = conv.forward(g, ps, x);
                norm.forward(g, ps, s)
            }
            None => x,
        };
        let out = g.add(y, skip);
        g.relu(out)
    }
}
