//! Recurrent update operator: motion encoding, convolutional GRU, flow and mask heads.

use crate::nn::layers::Conv2d;
use crate::nn::{ConvGeom, Graph, ParamBuilder, ParamStore, Var};

/// Convolutional GRU with 3×3 gates over `[h, x]`.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub update_gate: Conv2d,
    pub reset_gate: Conv2d,
    pub candidate: Conv2d,
    pub hidden: usize,
}

impl ConvGru {
    pub fn new(pb: &mut ParamBuilder, hidden: usize, input: usize) -> Self {
        let g = ConvGeom::same(3, 1, 1);
        ConvGru {
            update_gate: Conv2d::new(pb, "convz", hidden + input, hidden, g),
            reset_gate: Conv2d::new(pb, "convr", hidden + input, hidden, g),
            candidate: Conv2d::new(pb, "convq", hidden + input, hidden, g),
            hidden,
        }
    }

    /// `z = σ(Wz*[h,x])`, `r = σ(Wr*[h,x])`, `h̃ = tanh(Wh*[r⊙h, x])`,
    /// `h' = (1−z)⊙h + z⊙h̃`.
    pub fn step(&self, g: &mut Graph, ps: &ParamStore, h: Var, x: Var) -> Var {
        let hx = g.concat(&[h, x]);
        let z = self.update_gate.forward(g, ps, hx);
        let z = g.sigmoid(z);
        let r = self.reset_gate.forward(g, ps, hx);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let rhx = g.concat(&[rh, x]);
        let q = self.candidate.forward(g, ps, rhx);
        let q = g.tanh(q);
        let keep = g.one_minus(z);
        let a = g.mul(keep, h);
        let b = g.mul(z, q);
        g.add(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct UpdateBlock {
    corr_enc: Conv2d,
    flow_enc: Conv2d,
    pub gru: ConvGru,
    flow_head: (Conv2d, Conv2d),
    mask_head: (Conv2d, Conv2d),
    pub upsample_factor: usize,
}

/// Init gain of the last flow-head layer, so early increments stay sub-pixel.
const FLOW_HEAD_GAIN: f64 = 0.01;

/// Scale applied to the upsampling mask logits.
const MASK_SCALE: f64 = 0.25;

pub struct UpdateDims {
    pub corr_in: usize,
    pub corr_features: usize,
    pub flow_features: usize,
    pub context: usize,
    pub hidden: usize,
    pub head: usize,
    pub upsample_factor: usize,
}

impl UpdateBlock {
    pub fn new(pb: &mut ParamBuilder, d: &UpdateDims) -> Self {
        let x_channels = d.corr_features + d.flow_features + d.context;
        let ff = d.upsample_factor * d.upsample_factor;
        UpdateBlock {
            corr_enc: Conv2d::new(
                pb,
                "corr_enc",
                d.corr_in,
                d.corr_features,
                ConvGeom::new(1, 1, 0, 1),
            ),
            flow_enc: Conv2d::new(pb, "flow_enc", 2, d.flow_features, ConvGeom::same(3, 1, 1)),
            gru: ConvGru::new(&mut pb.sub("gru"), d.hidden, x_channels),
            flow_head: (
                Conv2d::new(pb, "flow_head.0", d.hidden, d.head, ConvGeom::same(3, 1, 1)),
                Conv2d::small(pb, "flow_head.1", d.head, 2, ConvGeom::same(3, 1, 1), FLOW_HEAD_GAIN),
            ),
            mask_head: (
                Conv2d::new(pb, "mask_head.0", d.hidden, d.head, ConvGeom::same(3, 1, 1)),
                Conv2d::new(pb, "mask_head.1", d.head, 9 * ff, ConvGeom::new(1, 1, 0, 1)),
            ),
            upsample_factor: d.upsample_factor,
        }
    }

    /// Fused GRU input, concatenated as (correlation, flow, context).
    pub fn motion_input(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        corr: Var,
        flow: Var,
        context: Var,
    ) -> Var {
        let c = self.corr_enc.forward(g, ps, corr);
        let c = g.relu(c);
        let f = self.flow_enc.forward(g, ps, flow);
        let f = g.relu(f);
        g.concat(&[c, f, context])
    }

    /// One refinement step: returns the new hidden state and the flow increment.
    pub fn step(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        hidden: Var,
        context: Var,
        corr: Var,
        flow: Var,
    ) -> (Var, Var) {
        let x = self.motion_input(g, ps, corr, flow, context);
        let h = self.gru.step(g, ps, hidden, x);
        let d = self.flow_head.0.forward(g, ps, h);
        let d = g.relu(d);
        let delta = self.flow_head.1.forward(g, ps, d);
        (h, delta)
    }

    /// Convex-upsampling logits, `[9·f², h, w]`.
    pub fn mask_logits(&self, g: &mut Graph, ps: &ParamStore, hidden: Var) -> Var {
        let m = self.mask_head.0.forward(g, ps, hidden);
        let m = g.relu(m);
        let m = self.mask_head.1.forward(g, ps, m);
        g.scale(m, MASK_SCALE)
    }
}
