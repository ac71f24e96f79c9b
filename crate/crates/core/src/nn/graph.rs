//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] records one forward evaluation. Each node owns its output;
//! [`Graph::backward`] walks the tape in reverse and returns gradients for every
//! node that depends on a trainable input.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    MulConst(Var, Tensor),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    AdaptivePool {
        x: Var,
        bins: usize,
    },
    Upsample(Var),
    Correlation {
        f0: Var,
        f1: Var,
        scale: f64,
    },
    Lookup {
        levels: Vec<Var>,
        coords: Tensor,
        radius: usize,
    },
    ConvexUpsample {
        flow: Var,
        logits: Var,
        weights: Tensor,
        factor: usize,
    },
    Warp {
        img: Var,
        flow: Var,
    },
    MaskedEpe {
        pred: Var,
        label: Tensor,
        keep: Tensor,
        denom: f64,
    },
    Tversky {
        pred: Var,
        label: Tensor,
        alpha: f64,
        beta: f64,
        smooth: f64,
    },
    WeightedSum(Var, Tensor),
    LinComb(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reduction used by the masked end-point-error loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide by the total pixel count.
    #[default]
    Mean,
    Sum,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    trainable: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph whose parameters receive gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable: true,
        }
    }

    /// A graph for inference: parameters are constants.
    pub fn inference() -> Self {
        Graph {
            trainable: false,
            ..Graph::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter node; repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, self.trainable);
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, geom }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, k), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let s = self.scale(x, -1.0);
        self.add_scalar(s, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(out, Op::Abs(x), ng)
    }

    /// Elementwise product with a constant; `c` is broadcast over channels when
    /// it has a single channel.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let c = broadcast_channels(&c, self.value(x).shape());
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        let ng = self.ng(x);
        self.push(out, Op::MulConst(x, c), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&ts);
        let ng = parts.iter().any(|&v| self.ng(v));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_channels(start, len);
        let ng = self.ng(x);
        self.push(out, Op::Slice { x, start }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, xhat, inv_std) = kernels::group_norm(
            self.value(x),
            groups,
            self.value(gamma),
            self.value(beta),
            GN_EPS,
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let out = kernels::avg_pool(self.value(x), k);
        let ng = self.ng(x);
        self.push(out, Op::AvgPool { x, k }, ng)
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, bins: usize) -> Var {
        let out = kernels::adaptive_avg_pool(self.value(x), bins);
        let ng = self.ng(x);
        self.push(out, Op::AdaptivePool { x, bins }, ng)
    }

    pub fn upsample_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = kernels::upsample_bilinear(self.value(x), h, w);
        let ng = self.ng(x);
        self.push(out, Op::Upsample(x), ng)
    }

    pub fn correlation(&mut self, f0: Var, f1: Var, scale: f64) -> Var {
        let out = kernels::correlation(self.value(f0), self.value(f1), scale);
        let ng = self.ng(f0) || self.ng(f1);
        self.push(out, Op::Correlation { f0, f1, scale }, ng)
    }

    /// Pyramid lookup at constant `coords` (`[2,H,W]`, x then y).
    pub fn lookup(&mut self, levels: &[Var], coords: Tensor, radius: usize) -> Var {
        let lv: Vec<&Tensor> = levels.iter().map(|&v| self.value(v)).collect();
        let out = kernels::lookup(&lv, &coords, radius);
        let ng = levels.iter().any(|&v| self.ng(v));
        self.push(
            out,
            Op::Lookup {
                levels: levels.to_vec(),
                coords,
                radius,
            },
            ng,
        )
    }

    /// Softmax over 9 neighbor logits, then convex combination of `factor·flow`.
    pub fn convex_upsample(&mut self, flow: Var, logits: Var, factor: usize) -> Var {
        let weights = kernels::convex_softmax(self.value(logits), factor);
        let out = kernels::convex_combine(self.value(flow), &weights, factor);
        let ng = self.ng(flow) || self.ng(logits);
        self.push(
            out,
            Op::ConvexUpsample {
                flow,
                logits,
                weights,
                factor,
            },
            ng,
        )
    }

    pub fn warp(&mut self, img: Var, flow: Var) -> Var {
        let out = kernels::warp(self.value(img), self.value(flow));
        let ng = self.ng(img) || self.ng(flow);
        self.push(out, Op::Warp { img, flow }, ng)
    }

    /// `reduce_p ‖pred_p − label_p‖₂ · keep_p` over a `[2,H,W]` flow.
    pub fn masked_epe(
        &mut self,
        pred: Var,
        label: Tensor,
        keep: Tensor,
        reduction: Reduction,
    ) -> Var {
        let (_, h, w) = self.value(pred).chw();
        let denom = match reduction {
            Reduction::Mean => (h * w) as f64,
            Reduction::Sum => 1.0,
        };
        let p = self.value(pred);
        let mut total = 0.0;
        for i in 0..h * w {
            let du = p.data()[i] - label.data()[i];
            let dv = p.data()[h * w + i] - label.data()[h * w + i];
            total += du.hypot(dv) * keep.data()[i];
        }
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(total / denom),
            Op::MaskedEpe {
                pred,
                label,
                keep,
                denom,
            },
            ng,
        )
    }

    /// `1 − (TP + s)/(TP + α·FN + β·FP + s)` with soft counts.
    pub fn tversky(&mut self, pred: Var, label: Tensor, alpha: f64, beta: f64, smooth: f64) -> Var {
        let (tp, fn_, fp) = soft_counts(self.value(pred), &label);
        let loss = 1.0 - (tp + smooth) / (tp + alpha * fn_ + beta * fp + smooth);
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(loss),
            Op::Tversky {
                pred,
                label,
                alpha,
                beta,
                smooth,
            },
            ng,
        )
    }

    /// `Σ x ⊙ w` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Var {
        let s = self.value(x).dot(&w);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::WeightedSum(x, w), ng)
    }

    /// `Σ k_i · x_i` over scalar nodes.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, k)| k * self.value(v).item()).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(s), Op::LinComb(terms.to_vec()), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.ng(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.iter().map(|(&k, &v)| (k, v)).collect(),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Conv { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *geom,
                    self.ng(*x),
                );
                if let Some(gx) = cg.input {
                    self.acc(grads, *x, gx);
                }
                self.acc(grads, *w, cg.weight);
                if let Some(b) = b {
                    self.acc(grads, *b, cg.bias);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |u, v| u * v));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |u, v| u * v));
                }
            }
            Op::Scale(x, k) => self.acc(grads, *x, g.map(|v| v * k)),
            Op::AddScalar(x) => self.acc(grads, *x, g),
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |u, v| if v > 0.0 { u } else { 0.0 });
                self.acc(grads, *x, gx)
            }
            Op::Sigmoid(x) => self.acc(grads, *x, g.zip_map(y, |u, s| u * s * (1.0 - s))),
            Op::Tanh(x) => self.acc(grads, *x, g.zip_map(y, |u, t| u * (1.0 - t * t))),
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |u, v| u * sign(v));
                self.acc(grads, *x, gx)
            }
            Op::MulConst(x, c) => self.acc(grads, *x, g.zip_map(c, |u, v| u * v)),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[0];
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_channels(start, c));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let (c, h, w) = self.value(*x).chw();
                let mut gx = Tensor::zeros(&[c, h, w]);
                let off = start * h * w;
                gx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (gx, gg, gb) = kernels::group_norm_backward(
                    xhat,
                    inv_std,
                    self.value(*gamma),
                    &g,
                    self.ng(*x),
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, gx);
                }
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::AvgPool { x, k } => {
                let gx = kernels::avg_pool_backward(self.value(*x).shape(), &g, *k);
                self.acc(grads, *x, gx)
            }
            Op::AdaptivePool { x, bins } => {
                let gx = kernels::adaptive_avg_pool_backward(self.value(*x).shape(), &g, *bins);
                self.acc(grads, *x, gx)
            }
            Op::Upsample(x) => {
                let gx = kernels::upsample_bilinear_backward(self.value(*x).shape(), &g);
                self.acc(grads, *x, gx)
            }
            Op::Correlation { f0, f1, scale } => {
                let (g0, g1) =
                    kernels::correlation_backward(self.value(*f0), self.value(*f1), &g, *scale);
                self.acc(grads, *f0, g0);
                self.acc(grads, *f1, g1);
            }
            Op::Lookup {
                levels,
                coords,
                radius,
            } => {
                let shapes: Vec<Vec<usize>> =
                    levels.iter().map(|&v| self.value(v).shape().to_vec()).collect();
                let gl = kernels::lookup_backward(&shapes, coords, *radius, &g);
                for (&v, gv) in levels.iter().zip(gl) {
                    self.acc(grads, v, gv);
                }
            }
            Op::ConvexUpsample {
                flow,
                logits,
                weights,
                factor,
            } => {
                let (gf, gl) =
                    kernels::convex_upsample_backward(self.value(*flow), weights, *factor, &g);
                self.acc(grads, *flow, gf);
                self.acc(grads, *logits, gl);
            }
            Op::Warp { img, flow } => {
                let (gi, gf) = kernels::warp_backward(
                    self.value(*img),
                    self.value(*flow),
                    &g,
                    self.ng(*img),
                    self.ng(*flow),
                );
                if let Some(gi) = gi {
                    self.acc(grads, *img, gi);
                }
                if let Some(gf) = gf {
                    self.acc(grads, *flow, gf);
                }
            }
            Op::MaskedEpe {
                pred,
                label,
                keep,
                denom,
            } => {
                let p = self.value(*pred);
                let (_, h, w) = p.chw();
                let hw = h * w;
                let k = g.item() / denom;
                let mut gp = Tensor::zeros(p.shape());
                let gd = gp.data_mut();
                for i in 0..hw {
                    let du = p.data()[i] - label.data()[i];
                    let dv = p.data()[hw + i] - label.data()[hw + i];
                    let n = du.hypot(dv);
                    // the norm has no derivative at zero error; use 0
                    if n > 0.0 {
                        gd[i] = k * keep.data()[i] * du / n;
                        gd[hw + i] = k * keep.data()[i] * dv / n;
                    }
                }
                self.acc(grads, *pred, gp);
            }
            Op::Tversky {
                pred,
                label,
                alpha,
                beta,
                smooth,
            } => {
                let (tp, fn_, fp) = soft_counts(self.value(*pred), label);
                let num = tp + smooth;
                let den = tp + alpha * fn_ + beta * fp + smooth;
                // dTP/do = l, dFN/do = -l, dFP/do = 1 - l
                let gs = g.item();
                let gp = label.map(|l| {
                    let dnum = l;
                    let dden = l - alpha * l + beta * (1.0 - l);
                    -gs * (dnum * den - num * dden) / (den * den)
                });
                self.acc(grads, *pred, gp);
            }
            Op::WeightedSum(x, w) => {
                let k = g.item();
                self.acc(grads, *x, w.map(|v| v * k));
            }
            Op::LinComb(terms) => {
                let k = g.item();
                for &(v, c) in terms {
                    self.acc(grads, v, Tensor::scalar(k * c));
                }
            }
        }
    }
}

const GN_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn broadcast_channels(c: &Tensor, shape: &[usize]) -> Tensor {
    if c.shape() == shape {
        return c.clone();
    }
    let (ch, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(c.shape(), &[1, h, w], "cannot broadcast {:?} to {shape:?}", c.shape());
    let mut data = Vec::with_capacity(ch * h * w);
    for _ in 0..ch {
        data.extend_from_slice(c.data());
    }
    Tensor::from_vec(shape, data)
}

/// Soft TP, FN, FP sums of a probability map against a binary label.
pub(crate) fn soft_counts(pred: &Tensor, label: &Tensor) -> (f64, f64, f64) {
    assert_eq!(pred.len(), label.len(), "prediction / label size mismatch");
    let mut tp = 0.0;
    let mut fn_ = 0.0;
    let mut fp = 0.0;
    for (&o, &l) in pred.data().iter().zip(label.data()) {
        tp += o * l;
        fn_ += (1.0 - o) * l;
        fp += o * (1.0 - l);
    }
    (tp, fn_, fp)
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter that took part in the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, relative_error, sample_indices, STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    /// Checks d/dx of `Σ w ⊙ op(x)` for a unary graph op.
    fn check_unary(x: Tensor, op: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = op(&mut g, v);
            g.value(y).shape().to_vec()
        };
        let w = random(&probe, -1.0, 1.0, &mut rng);
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let y = op(&mut g, v);
            g.value(y).dot(&w)
        };
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let y = op(&mut g, v);
        let loss = g.weighted_sum(y, w.clone());
        let grads = g.backward(loss);
        let analytic = grads.wrt(v).expect("input gradient").clone();
        let idx = sample_indices(x.len(), 40);
        let numeric = numeric_grad(&x, &idx, STEP, eval);
        let picked: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
        let err = relative_error(&picked, &numeric);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn pointwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 3], -2.0, 2.0, &mut rng);
        check_unary(x.clone(), |g, v| g.sigmoid(v), 1e-7);
        check_unary(x.clone(), |g, v| g.tanh(v), 1e-7);
        check_unary(x.clone(), |g, v| g.scale(v, -1.5), 1e-7);
        check_unary(x.clone(), |g, v| g.one_minus(v), 1e-7);
        check_unary(x.clone(), |g, v| g.mul(v, v), 1e-7);
        let c = random(&[1, 3, 3], 0.0, 1.0, &mut rng);
        check_unary(x, move |g, v| g.mul_const(v, c.clone()), 1e-7);
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 4, 4], -1.0, 1.0, &mut rng);
        check_unary(x.clone(), |g, v| g.slice_channels(v, 1, 2), 1e-7);
        check_unary(
            x.clone(),
            |g, v| {
                let a = g.slice_channels(v, 0, 1);
                g.concat(&[v, a])
            },
            1e-7,
        );
        check_unary(x.clone(), |g, v| g.avg_pool(v, 2), 1e-7);
        check_unary(x.clone(), |g, v| g.adaptive_avg_pool(v, 3), 1e-7);
        check_unary(x.clone(), |g, v| g.upsample_bilinear(v, 7, 9), 1e-7);
        check_unary(
            x,
            |g, v| {
                let gamma = g.constant(Tensor::from_vec(&[4], vec![1.0, 0.5, -2.0, 1.5]));
                let beta = g.constant(Tensor::from_vec(&[4], vec![0.1, 0.0, 0.3, -0.2]));
                g.group_norm(v, gamma, beta, 2)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_and_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 6, 6], -1.0, 1.0, &mut rng);
        let w = random(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
        for geom in [ConvGeom::same(3, 1, 1), ConvGeom::same(3, 2, 1), ConvGeom::same(3, 1, 2)] {
            let w = w.clone();
            check_unary(
                x.clone(),
                move |g, v| {
                    let wv = g.constant(w.clone());
                    g.conv2d(v, wv, None, geom)
                },
                1e-7,
            );
        }
        let f1 = random(&[3, 6, 6], -1.0, 1.0, &mut rng);
        check_unary(
            x,
            move |g, v| {
                let b = g.constant(f1.clone());
                g.correlation(v, b, 0.5)
            },
            1e-7,
        );
    }

    #[test]
    fn lookup_wrt_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corr = random(&[16, 4, 4], -1.0, 1.0, &mut rng);
        let coords = random(&[2, 4, 4], -1.0, 4.0, &mut rng);
        check_unary(
            corr,
            move |g, v| {
                let l1 = g.avg_pool(v, 2);
                g.lookup(&[v, l1], coords.clone(), 1)
            },
            1e-7,
        );
    }

    #[test]
    fn convex_upsample_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flow = random(&[2, 3, 3], -2.0, 2.0, &mut rng);
        let logits = random(&[9 * 4, 3, 3], -1.0, 1.0, &mut rng);
        let l2 = logits.clone();
        check_unary(
            flow.clone(),
            move |g, v| {
                let l = g.constant(l2.clone());
                g.convex_upsample(v, l, 2)
            },
            1e-7,
        );
        check_unary(
            logits,
            move |g, v| {
                let f = g.constant(flow.clone());
                g.convex_upsample(f, v, 2)
            },
            1e-7,
        );
    }

    #[test]
    fn warp_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random(&[3, 6, 6], 0.0, 1.0, &mut rng);
        // keep sample points away from integer grid lines and the border
        let flow = Tensor::from_vec(
            &[2, 6, 6],
            (0..72).map(|i| 0.3 + 0.4 * ((i * 37 % 11) as f64 / 11.0) - 0.5 * (i % 2) as f64).collect(),
        );
        let f2 = flow.clone();
        check_unary(
            img.clone(),
            move |g, v| {
                let f = g.constant(f2.clone());
                g.warp(v, f)
            },
            1e-7,
        );
        check_unary(
            flow,
            move |g, v| {
                let i = g.constant(img.clone());
                g.warp(i, v)
            },
            1e-5,
        );
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred = random(&[2, 4, 4], -2.0, 2.0, &mut rng);
        let label = random(&[2, 4, 4], -2.0, 2.0, &mut rng);
        let keep = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| (i % 3 != 0) as u8 as f64).collect());
        check_unary(
            pred,
            move |g, v| {
                let l = g.masked_epe(v, label.clone(), keep.clone(), Reduction::Mean);
                g.scale(l, 1.0)
            },
            1e-7,
        );
        let prob = random(&[1, 4, 4], 0.05, 0.95, &mut rng);
        let gt = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| (i % 5 < 2) as u8 as f64).collect());
        check_unary(
            prob,
            move |g, v| g.tversky(v, gt.clone(), 0.7, 0.3, 1e-6),
            1e-7,
        );
    }
}
