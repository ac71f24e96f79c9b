//! Recurrent all-pairs optical flow branch.
//!
//! Both frames go through a shared stride-8 feature encoder; a context encoder
//! sees the first frame only. All-pairs feature correlations are pooled into a
//! four-level pyramid, and a convolutional GRU refines the flow from zero by
//! repeatedly looking up correlation windows around the current estimate. The
//! final 1/8-resolution flow is upsampled by learned convex combinations.

mod corr;
mod encoder;
mod update;

pub use corr::{build_pyramid, correlation_volume, lookup, CorrVolume, CorrelationPyramid, PYRAMID_LEVELS};
pub use encoder::{Encoder, EncoderLayout};
pub use update::{ConvGru, UpdateBlock, UpdateDims};

use serde::{Deserialize, Serialize};

use crate::domain::{FlowField, Image};
use crate::error::{ensure, Result};
use crate::nn::{kernels, Graph, ParamBuilder, ParamStore, Var};
use crate::tensor::Tensor;

/// Encoder output stride.
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfConfig {
    pub feature_channels: usize,
    pub hidden_channels: usize,
    pub context_channels: usize,
    pub encoder: EncoderLayout,
    /// Channels of the encoded correlation features fed to the GRU.
    pub corr_features: usize,
    /// Channels of the encoded current-flow features fed to the GRU.
    pub flow_features: usize,
    /// Width of the flow and mask heads.
    pub head_channels: usize,
    /// Refinement steps `N`.
    pub iterations: usize,
    /// Lookup radius `r`.
    pub radius: usize,
}

impl OfConfig {
    pub fn toy() -> Self {
        OfConfig {
            feature_channels: 32,
            hidden_channels: 48,
            context_channels: 48,
            encoder: EncoderLayout {
                widths: [16, 24, 32],
                blocks_per_stage: 1,
                stem_kernel: 7,
                norm_groups: 4,
            },
            corr_features: 32,
            flow_features: 16,
            head_channels: 64,
            iterations: 12,
            radius: 4,
        }
    }

    pub fn full() -> Self {
        OfConfig {
            feature_channels: 256,
            hidden_channels: 128,
            context_channels: 128,
            encoder: EncoderLayout {
                widths: [64, 96, 128],
                blocks_per_stage: 2,
                stem_kernel: 7,
                norm_groups: 8,
            },
            corr_features: 192,
            flow_features: 64,
            head_channels: 256,
            iterations: 12,
            radius: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, "iterations must be at least 1");
        ensure!(self.radius >= 1, "lookup radius must be at least 1");
        ensure!(
            self.feature_channels > 0 && self.hidden_channels > 0 && self.context_channels > 0,
            "channel counts must be positive"
        );
        Ok(())
    }

    /// Length of the per-pixel lookup vector.
    pub fn lookup_channels(&self) -> usize {
        PYRAMID_LEVELS * kernels::window_len(self.radius)
    }
}

/// Stride-8 feature map `[C, H/8, W/8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Hidden state and fixed context features of the recurrent unit.
#[derive(Clone, Debug, PartialEq)]
pub struct GruState {
    pub hidden: Tensor,
    pub context: Tensor,
}

/// Graph handles produced by one flow-branch forward pass.
pub struct OfTrace {
    /// Low-resolution estimates `f_1 … f_N`.
    pub iterates: Vec<Var>,
    /// Increments `Δf_0 … Δf_{N−1}`.
    pub deltas: Vec<Var>,
    /// Full-resolution upsampling of `f_N`.
    pub flow: Var,
    /// Full-resolution upsampling of every iterate, when requested.
    pub upsampled_iterates: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct OfBranch {
    pub config: OfConfig,
    pub feature_encoder: Encoder,
    pub context_encoder: Encoder,
    pub update: UpdateBlock,
}

impl OfBranch {
    pub fn new(pb: &mut ParamBuilder, config: OfConfig) -> Result<Self> {
        config.validate()?;
        let feature_encoder = Encoder::new(
            &mut pb.sub("fnet"),
            &config.encoder,
            config.feature_channels,
        );
        let context_encoder = Encoder::new(
            &mut pb.sub("cnet"),
            &config.encoder,
            config.hidden_channels + config.context_channels,
        );
        let update = UpdateBlock::new(
            &mut pb.sub("update"),
            &UpdateDims {
                corr_in: config.lookup_channels(),
                corr_features: config.corr_features,
                flow_features: config.flow_features,
                context: config.context_channels,
                hidden: config.hidden_channels,
                head: config.head_channels,
                upsample_factor: STRIDE,
            },
        );
        Ok(OfBranch {
            config,
            feature_encoder,
            context_encoder,
            update,
        })
    }

    /// Initial hidden state (tanh) and context (ReLU) from the first frame.
    pub fn context_graph(&self, g: &mut Graph, ps: &ParamStore, t0: Var) -> (Var, Var) {
        let c = self.context_encoder.forward(g, ps, t0);
        let ch = self.config.hidden_channels;
        let h = g.slice_channels(c, 0, ch);
        let h = g.tanh(h);
        let ctx = g.slice_channels(c, ch, self.config.context_channels);
        let ctx = g.relu(ctx);
        (h, ctx)
    }

    /// Records the whole branch on `g`. `t0`, `t1` are `[3,H,W]` in `[0,1]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        t0: Var,
        t1: Var,
        upsample_every_iterate: bool,
    ) -> OfTrace {
        let f0 = self.feature_encoder.forward(g, ps, t0);
        let f1 = self.feature_encoder.forward(g, ps, t1);
        let (mut hidden, context) = self.context_graph(g, ps, t0);
        let (c, h, w) = g.value(f0).chw();
        let corr = g.correlation(f0, f1, corr::corr_scale(c));
        let mut levels = vec![corr];
        for _ in 1..PYRAMID_LEVELS {
            let next = g.avg_pool(*levels.last().unwrap(), 2);
            levels.push(next);
        }

        let mut flow_value = Tensor::zeros(&[2, h, w]);
        let mut flow_var: Option<Var> = None;
        let mut iterates = Vec::with_capacity(self.config.iterations);
        let mut deltas = Vec::with_capacity(self.config.iterations);
        let mut upsampled_iterates = Vec::new();
        for k in 0..self.config.iterations {
            // lookup positions and the flow encoding see a detached estimate
            let coords = corr::displaced_coords(&flow_value);
            let feats = g.lookup(&levels, coords, self.config.radius);
            let flow_in = g.constant(flow_value.clone());
            let (h_next, delta) = self.update.step(g, ps, hidden, context, feats, flow_in);
            hidden = h_next;
            let next = match flow_var {
                Some(prev) => g.add(prev, delta),
                None => delta,
            };
            flow_var = Some(next);
            flow_value = g.value(next).clone();
            iterates.push(next);
            deltas.push(delta);
            if upsample_every_iterate && k + 1 < self.config.iterations {
                let logits = self.update.mask_logits(g, ps, hidden);
                upsampled_iterates.push(g.convex_upsample(next, logits, STRIDE));
            }
        }
        let last = flow_var.expect("at least one iteration");
        let logits = self.update.mask_logits(g, ps, hidden);
        let flow = g.convex_upsample(last, logits, STRIDE);
        if upsample_every_iterate {
            upsampled_iterates.push(flow);
        }
        OfTrace {
            iterates,
            deltas,
            flow,
            upsampled_iterates,
        }
    }

    pub fn encode_features(&self, ps: &ParamStore, img: &Image) -> Result<FeatureMap> {
        check_image(img)?;
        let mut g = Graph::inference();
        let x = g.constant(img.to_tensor());
        let f = self.feature_encoder.forward(&mut g, ps, x);
        Ok(FeatureMap {
            data: g.value(f).clone(),
        })
    }

    /// Initial recurrent state for a first frame.
    pub fn initial_state(&self, ps: &ParamStore, t0: &Image) -> Result<GruState> {
        check_image(t0)?;
        let mut g = Graph::inference();
        let x = g.constant(t0.to_tensor());
        let (h, c) = self.context_graph(&mut g, ps, x);
        Ok(GruState {
            hidden: g.value(h).clone(),
            context: g.value(c).clone(),
        })
    }

    /// One recurrent step on plain values: returns the next state and `Δf`.
    pub fn gru_update(
        &self,
        ps: &ParamStore,
        state: &GruState,
        corr_feats: &Tensor,
        flow: &FlowField,
    ) -> Result<(GruState, FlowField)> {
        let (ch, h, w) = state.hidden.chw();
        ensure!(ch == self.config.hidden_channels, "hidden state has {ch} channels");
        ensure!(
            state.context.shape() == [self.config.context_channels, h, w],
            "context shape {:?} does not match hidden state",
            state.context.shape()
        );
        ensure!(
            corr_feats.shape() == [self.config.lookup_channels(), h, w],
            "correlation features have shape {:?}",
            corr_feats.shape()
        );
        ensure!(
            flow.height() == h && flow.width() == w,
            "flow does not match the state resolution"
        );
        let mut g = Graph::inference();
        let hv = g.constant(state.hidden.clone());
        let cv = g.constant(state.context.clone());
        let corr = g.constant(corr_feats.clone());
        let fv = g.constant(flow.to_tensor());
        let (hn, delta) = self.update.step(&mut g, ps, hv, cv, corr, fv);
        Ok((
            GruState {
                hidden: g.value(hn).clone(),
                context: state.context.clone(),
            },
            FlowField::from_tensor(g.value(delta))?,
        ))
    }

    /// All `N` low-resolution estimates, in pixels of the 1/8 grid.
    pub fn iterate_flow(&self, ps: &ParamStore, t0: &Image, t1: &Image) -> Result<Vec<FlowField>> {
        let mut g = Graph::inference();
        let trace = self.run(&mut g, ps, t0, t1)?;
        trace
            .iterates
            .iter()
            .map(|&v| FlowField::from_tensor(g.value(v)))
            .collect()
    }

    /// Full-resolution flow `output₁`.
    pub fn forward(&self, ps: &ParamStore, t0: &Image, t1: &Image) -> Result<FlowField> {
        let mut g = Graph::inference();
        let trace = self.run(&mut g, ps, t0, t1)?;
        FlowField::from_tensor(g.value(trace.flow))
    }

    fn run(&self, g: &mut Graph, ps: &ParamStore, t0: &Image, t1: &Image) -> Result<OfTrace> {
        check_pair(t0, t1)?;
        let a = g.constant(t0.to_tensor());
        let b = g.constant(t1.to_tensor());
        Ok(self.forward_graph(g, ps, a, b, false))
    }
}

fn check_image(img: &Image) -> Result<()> {
    ensure!(
        img.height() % STRIDE == 0 && img.width() % STRIDE == 0,
        "image dimensions {}x{} must be divisible by {STRIDE}",
        img.width(),
        img.height()
    );
    corr::check_pyramid_size(img.height() / STRIDE, img.width() / STRIDE)
}

pub(crate) fn check_pair(t0: &Image, t1: &Image) -> Result<()> {
    ensure!(
        t0.height() == t1.height() && t0.width() == t1.width(),
        "frame shapes differ: {}x{} vs {}x{}",
        t0.width(),
        t0.height(),
        t1.width(),
        t1.height()
    );
    check_image(t0)
}

/// Convex upsampling with explicit (post-softmax) weights `[9·64, h, w]`.
///
/// Each fine pixel becomes a convex combination of its 3×3 coarse
/// neighborhood (edge-replicated) and flow values are scaled by 8.
pub fn upsample_convex(flow_lr: &FlowField, weights: &Tensor) -> Result<FlowField> {
    let (h, w) = (flow_lr.height(), flow_lr.width());
    let ff = STRIDE * STRIDE;
    ensure!(
        weights.shape() == [9 * ff, h, w],
        "upsampling weights must be [{}, {h}, {w}], got {:?}",
        9 * ff,
        weights.shape()
    );
    let hw = h * w;
    for s in 0..ff {
        for p in 0..hw {
            let mut sum = 0.0;
            for k in 0..9 {
                let v = weights.data()[(k * ff + s) * hw + p];
                ensure!(v >= 0.0, "upsampling weights must be non-negative");
                sum += v;
            }
            ensure!(
                (sum - 1.0).abs() <= 1e-6,
                "upsampling weights must sum to 1 (got {sum})"
            );
        }
    }
    FlowField::from_tensor(&kernels::convex_combine(&flow_lr.to_tensor(), weights, STRIDE))
}

/// Softmax-normalized weights for raw mask logits.
pub fn convex_weights(logits: &Tensor) -> Tensor {
    kernels::convex_softmax(logits, STRIDE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamBuilder};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    // 3×3 zero-padded convolution written out per tap.
    fn naive_conv3(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (ci, h, wd) = x.chw();
        let co = w.shape()[0];
        let mut out = Tensor::zeros(&[co, h, wd]);
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let wi = ((o * ci + c) * 3 + ky) * 3 + kx;
                                acc += w.data()[wi] * x.at3(c, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * wd + xx] = acc;
                }
            }
        }
        out
    }

    fn gru_with_update_bias(bias: f64) -> (ConvGru, ParamStore) {
        let mut ps = ParamStore::new();
        let mut rng = init_rng(3);
        let gru = ConvGru::new(&mut ParamBuilder::new(&mut ps, &mut rng), 3, 2);
        ps.get_mut(gru.update_gate.weight).data_mut().fill(0.0);
        ps.get_mut(gru.update_gate.bias.unwrap()).data_mut().fill(bias);
        (gru, ps)
    }

    fn run_gru(gru: &ConvGru, ps: &ParamStore, h: &Tensor, x: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let xv = g.constant(x.clone());
        let out = gru.step(&mut g, ps, hv, xv);
        g.value(out).clone()
    }

    #[test]
    fn closed_update_gate_keeps_hidden_state() {
        let (gru, ps) = gru_with_update_bias(-60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let x = random(&[2, 4, 4], -1.0, 1.0, &mut rng);
        assert!(run_gru(&gru, &ps, &h, &x).max_abs_diff(&h) <= 1e-6);
    }

    #[test]
    fn open_update_gate_yields_candidate() {
        let (gru, ps) = gru_with_update_bias(60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let x = random(&[2, 4, 4], -1.0, 1.0, &mut rng);

        let hx = Tensor::concat_channels(&[&h, &x]);
        let r = naive_conv3(
            &hx,
            ps.get(gru.reset_gate.weight),
            ps.get(gru.reset_gate.bias.unwrap()),
        )
        .map(|v| 1.0 / (1.0 + (-v).exp()));
        let rh = r.zip_map(&h, |a, b| a * b);
        let rhx = Tensor::concat_channels(&[&rh, &x]);
        let q = naive_conv3(
            &rhx,
            ps.get(gru.candidate.weight),
            ps.get(gru.candidate.bias.unwrap()),
        )
        .map(f64::tanh);
        assert!(run_gru(&gru, &ps, &h, &x).max_abs_diff(&q) <= 1e-6);
    }

    fn toy_branch(iterations: usize) -> (OfBranch, ParamStore) {
        let mut ps = ParamStore::new();
        let mut rng = init_rng(11);
        let cfg = OfConfig {
            iterations,
            ..OfConfig::toy()
        };
        let of = OfBranch::new(&mut ParamBuilder::new(&mut ps, &mut rng), cfg).unwrap();
        (of, ps)
    }

    fn frames() -> (Image, Image) {
        let t0 = Image::from_fn(64, 64, |y, x| {
            let a = (x as f64 * 0.3).sin() * 0.5 + 0.5;
            let b = (y as f64 * 0.2 + x as f64 * 0.1).cos() * 0.5 + 0.5;
            [a, b, a * b]
        })
        .unwrap();
        let t1 = Image::from_fn(64, 64, |y, x| {
            let xs = x as f64 - 1.5;
            let a = (xs * 0.3).sin() * 0.5 + 0.5;
            let b = (y as f64 * 0.2 + xs * 0.1).cos() * 0.5 + 0.5;
            [a, b, a * b]
        })
        .unwrap();
        (t0, t1)
    }

    #[test]
    fn iterates_accumulate_increments() {
        let (of, ps) = toy_branch(4);
        let (t0, t1) = frames();
        let mut g = Graph::inference();
        let trace = of.run(&mut g, &ps, &t0, &t1).unwrap();
        assert_eq!(trace.iterates.len(), 4);
        let mut sum = Tensor::zeros(g.value(trace.deltas[0]).shape());
        for (f, d) in trace.iterates.iter().zip(&trace.deltas) {
            sum.add_assign(g.value(*d));
            assert!(g.value(*f).max_abs_diff(&sum) <= 1e-12);
        }
    }

    #[test]
    fn shorter_runs_are_prefixes() {
        let (short, ps) = toy_branch(2);
        let (long, ps_long) = toy_branch(5);
        assert_eq!(ps.fingerprint(), ps_long.fingerprint());
        let (t0, t1) = frames();
        let a = short.iterate_flow(&ps, &t0, &t1).unwrap();
        let b = long.iterate_flow(&ps, &t0, &t1).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 5);
        assert_eq!(a[..], b[..2]);
    }

    #[test]
    fn stepwise_update_matches_graph() {
        let (of, ps) = toy_branch(3);
        let (t0, t1) = frames();
        let f0 = of.encode_features(&ps, &t0).unwrap();
        let f1 = of.encode_features(&ps, &t1).unwrap();
        let pyr = corr::build_pyramid(&corr::correlation_volume(&f0, &f1).unwrap()).unwrap();
        let mut state = of.initial_state(&ps, &t0).unwrap();
        let mut flow = FlowField::zeros(8, 8);
        let expected = of.iterate_flow(&ps, &t0, &t1).unwrap();
        for e in &expected {
            let feats = corr::lookup(&pyr, &flow, of.config.radius).unwrap();
            let (next, delta) = of.gru_update(&ps, &state, &feats, &flow).unwrap();
            state = next;
            flow = FlowField::from_tensor(&flow.to_tensor().zip_map(&delta.to_tensor(), |a, b| a + b)).unwrap();
            assert!(flow.to_tensor().max_abs_diff(&e.to_tensor()) <= 1e-12);
        }
    }

    #[test]
    fn forward_is_full_resolution() {
        let (of, ps) = toy_branch(2);
        let (t0, t1) = frames();
        let f = of.forward(&ps, &t0, &t1).unwrap();
        assert_eq!((f.height(), f.width()), (64, 64));
        assert!(f.u().iter().chain(f.v()).all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_frames() {
        let (of, ps) = toy_branch(1);
        assert!(Image::filled(60, 64, [0.5; 3]).is_err());
        let a = Image::filled(64, 64, [0.5; 3]).unwrap();
        let b = Image::filled(64, 72, [0.5; 3]).unwrap();
        assert!(of.forward(&ps, &a, &b).is_err());
        // 2×2 coarse grid cannot hold four pyramid levels
        let tiny = Image::filled(16, 16, [0.5; 3]).unwrap();
        assert!(of.forward(&ps, &tiny, &tiny).is_err());
    }

    fn one_hot_weights(h: usize, w: usize, tap: usize) -> Tensor {
        let ff = STRIDE * STRIDE;
        let mut t = Tensor::zeros(&[9 * ff, h, w]);
        for s in 0..ff {
            for p in 0..h * w {
                t.data_mut()[(tap * ff + s) * h * w + p] = 1.0;
            }
        }
        t
    }

    #[test]
    fn center_weights_replicate_scaled_flow() {
        let lr = FlowField::from_fn(2, 3, |y, x| (x as f64 - 0.5, y as f64 * 0.25)).unwrap();
        let up = upsample_convex(&lr, &one_hot_weights(2, 3, 4)).unwrap();
        assert_eq!((up.height(), up.width()), (16, 24));
        for y in 0..16 {
            for x in 0..24 {
                let (u, v) = lr.at(y / 8, x / 8);
                assert_eq!(up.at(y, x), (8.0 * u, 8.0 * v));
            }
        }
    }

    #[test]
    fn offcenter_weights_read_the_neighbor() {
        let lr = FlowField::from_fn(3, 3, |y, x| ((y * 3 + x) as f64, 0.0)).unwrap();
        // tap 5 is (dy, dx) = (0, +1)
        let up = upsample_convex(&lr, &one_hot_weights(3, 3, 5)).unwrap();
        assert_eq!(up.at(9, 9).0, 8.0 * lr.at(1, 2).0);
        // right column replicates its edge
        assert_eq!(up.at(9, 17).0, 8.0 * lr.at(1, 2).0);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let lr = FlowField::zeros(2, 2);
        let mut w = one_hot_weights(2, 2, 4);
        w.data_mut()[0] = 0.5;
        assert!(upsample_convex(&lr, &w).is_err());
        let mut neg = one_hot_weights(2, 2, 4);
        neg.data_mut()[0] = -0.25;
        neg.data_mut()[4 * 64 * 4] = 1.25;
        assert!(upsample_convex(&lr, &neg).is_err());
        assert!(upsample_convex(&lr, &Tensor::zeros(&[9, 2, 2])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_weights_preserve_constant_flow(
            u in -5.0f64..5.0, v in -5.0f64..5.0, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = random(&[9 * 64, 2, 2], -3.0, 3.0, &mut rng);
            let lr = FlowField::constant(2, 2, u, v);
            let up = upsample_convex(&lr, &convex_weights(&logits)).unwrap();
            for (a, b) in up.u().iter().zip(up.v()) {
                prop_assert!((a - 8.0 * u).abs() < 1e-9);
                prop_assert!((b - 8.0 * v).abs() < 1e-9);
            }
        }
    }
}
