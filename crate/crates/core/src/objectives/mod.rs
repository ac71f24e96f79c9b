//! Training objectives and evaluation metrics.
//!
//! Losses: masked flow end-point error on unchanged pixels, Tversky loss on
//! the change probabilities, and their `ψ`-weighted sum. Metrics: pixel
//! precision / recall / F1, end-point error, mEPE over the union of moving
//! regions, and the combined score FEPE = F1 / (mEPE + ε).

mod report;

pub use report::{Aggregate, MetricReport, SampleError, SampleMetrics};

use serde::{Deserialize, Serialize};

use crate::domain::{ChangeMask, FlowField, MaskKind, ScalarMap};
use crate::error::{ensure, Result};
use crate::nn::{Graph, Reduction, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of false negatives.
    pub alpha: f64,
    /// Weight of false positives.
    pub beta: f64,
    /// Scale of the Tversky term in the total loss.
    pub psi: f64,
    pub smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.7,
            beta: 0.3,
            psi: 10.0,
            smoothing: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha > 0.0 && self.beta > 0.0, "alpha and beta must be positive");
        ensure!(self.psi > 0.0, "psi must be positive");
        ensure!(self.smoothing > 0.0, "smoothing must be positive");
        Ok(())
    }
}

fn same_flow_shape(a: &FlowField, b: &FlowField) -> Result<()> {
    ensure!(
        a.same_shape(b),
        "flow shapes differ: {}x{} vs {}x{}",
        a.width(),
        a.height(),
        b.width(),
        b.height()
    );
    Ok(())
}

fn keep_map(label2: &ChangeMask) -> Tensor {
    Tensor::from_vec(
        &[1, label2.height(), label2.width()],
        label2.data().iter().map(|v| 1.0 - v).collect(),
    )
}

/// End-point error on pixels outside the change label, reduced over all pixels.
pub fn l2_flow_loss(
    output1: &FlowField,
    label1: &FlowField,
    label2: &ChangeMask,
    reduction: Reduction,
) -> Result<f64> {
    same_flow_shape(output1, label1)?;
    ensure!(
        label2.height() == output1.height() && label2.width() == output1.width(),
        "change label shape does not match the flow"
    );
    ensure!(
        label2.kind() == MaskKind::GroundTruth,
        "flow loss needs a ground-truth change label"
    );
    if label2.count_ones() == label2.data().len() {
        log::debug!("flow loss: every pixel is masked, loss is 0");
        return Ok(0.0);
    }
    let keep = keep_map(label2);
    let mut total = 0.0;
    for (i, k) in keep.data().iter().enumerate() {
        let du = output1.u()[i] - label1.u()[i];
        let dv = output1.v()[i] - label1.v()[i];
        total += du.hypot(dv) * k;
    }
    Ok(match reduction {
        Reduction::Mean => total / keep.len() as f64,
        Reduction::Sum => total,
    })
}

/// Graph form of [`l2_flow_loss`]; `pred` is `[2,H,W]`.
pub fn l2_flow_loss_var(
    g: &mut Graph,
    pred: Var,
    label1: &FlowField,
    label2: &ChangeMask,
    reduction: Reduction,
) -> Var {
    g.masked_epe(pred, label1.to_tensor(), keep_map(label2), reduction)
}

/// `1 − (TP + s)/(TP + α·FN + β·FP + s)` with soft counts.
pub fn tversky_loss(output2: &ChangeMask, label2: &ChangeMask, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    ensure!(
        output2.height() == label2.height() && output2.width() == label2.width(),
        "prediction and label shapes differ"
    );
    ensure!(label2.is_binary(), "change label must be binary");
    let (mut tp, mut fn_, mut fp) = (0.0, 0.0, 0.0);
    for (&o, &l) in output2.data().iter().zip(label2.data()) {
        tp += o * l;
        fn_ += (1.0 - o) * l;
        fp += o * (1.0 - l);
    }
    let s = w.smoothing;
    Ok(1.0 - (tp + s) / (tp + w.alpha * fn_ + w.beta * fp + s))
}

/// Graph form of [`tversky_loss`]; `pred` is `[1,H,W]` probabilities.
pub fn tversky_loss_var(g: &mut Graph, pred: Var, label2: &ChangeMask, w: &LossWeights) -> Var {
    g.tversky(pred, label2.to_tensor(), w.alpha, w.beta, w.smoothing)
}

/// `l2 + ψ·tversky`.
pub fn total_loss(l2: f64, tversky: f64, psi: f64) -> Result<f64> {
    ensure!(psi > 0.0, "psi must be positive, got {psi}");
    Ok(l2 + psi * tversky)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn add(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    /// `(precision, recall, f1)`, each 0 when its denominator vanishes.
    pub fn scores(&self) -> (f64, f64, f64) {
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p > 0.0 && r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        (p, r, f1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl From<Counts> for Prf {
    fn from(counts: Counts) -> Self {
        let (precision, recall, f1) = counts.scores();
        Prf {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

pub fn confusion_counts(pred: &ChangeMask, gt: &ChangeMask) -> Result<Counts> {
    ensure!(
        pred.height() == gt.height() && pred.width() == gt.width(),
        "mask shapes differ"
    );
    ensure!(pred.is_binary(), "prediction mask must be binary");
    ensure!(gt.is_binary(), "ground-truth mask must be binary");
    let mut c = Counts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

pub fn precision_recall_f1(pred: &ChangeMask, gt: &ChangeMask) -> Result<Prf> {
    let counts = confusion_counts(pred, gt)?;
    if counts.tp + counts.fp == 0 || counts.tp + counts.fn_ == 0 {
        log::debug!("precision/recall with an empty denominator reported as 0");
    }
    Ok(counts.into())
}

/// Per-pixel Euclidean distance between two flow fields.
pub fn epe_map(f: &FlowField, f_gt: &FlowField) -> Result<ScalarMap> {
    same_flow_shape(f, f_gt)?;
    let data = f
        .u()
        .iter()
        .zip(f.v())
        .zip(f_gt.u().iter().zip(f_gt.v()))
        .map(|((u, v), (gu, gv))| (u - gu).hypot(v - gv))
        .collect();
    Ok(ScalarMap {
        height: f.height(),
        width: f.width(),
        data,
    })
}

/// Mean EPE over the union of moving pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mepe {
    pub value: f64,
    /// Pixels in `{|F_gt| > δ} ∪ {|F| > δ}`.
    pub support: usize,
}

impl Mepe {
    /// No pixel moves in either field; `value` is then 0 by convention.
    pub fn undefined_motion(&self) -> bool {
        self.support == 0
    }
}

pub fn mepe(f: &FlowField, f_gt: &FlowField, delta: f64) -> Result<Mepe> {
    ensure!(delta >= 0.0, "offset threshold must be >= 0, got {delta}");
    let epe = epe_map(f, f_gt)?;
    let mut sum = 0.0;
    let mut support = 0;
    for i in 0..epe.data.len() {
        let moving_gt = f_gt.u()[i].hypot(f_gt.v()[i]) > delta;
        let moving = f.u()[i].hypot(f.v()[i]) > delta;
        if moving_gt || moving {
            sum += epe.data[i];
            support += 1;
        }
    }
    if support == 0 {
        log::debug!("mEPE: empty motion union, reported as 0");
        return Ok(Mepe {
            value: 0.0,
            support,
        });
    }
    Ok(Mepe {
        value: sum / support as f64,
        support,
    })
}

/// `f1 / (mepe + ε)`.
pub fn fepe(f1: f64, mepe: f64, eps: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&f1), "f1 must lie in [0,1], got {f1}");
    ensure!(mepe >= 0.0, "mEPE must be >= 0, got {mepe}");
    ensure!(eps > 0.0, "epsilon must be positive, got {eps}");
    Ok(f1 / (mepe + eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(h: usize, w: usize, data: Vec<f64>) -> ChangeMask {
        ChangeMask::new(h, w, data, MaskKind::GroundTruth).unwrap()
    }

    fn pred(h: usize, w: usize, data: Vec<f64>) -> ChangeMask {
        ChangeMask::new(h, w, data, MaskKind::Prediction).unwrap()
    }

    #[test]
    fn flow_loss_examples() {
        let label = FlowField::new(2, 2, vec![1.0, -2.0, 0.5, 0.0], vec![0.0, 1.0, 3.0, -1.0]).unwrap();
        let none = gt(2, 2, vec![0.0; 4]);
        assert_eq!(l2_flow_loss(&label, &label, &none, Reduction::Mean).unwrap(), 0.0);

        let out = FlowField::new(2, 2, vec![10.0, 9.0, 8.0, 7.0], vec![1.0; 4]).unwrap();
        let all = gt(2, 2, vec![1.0; 4]);
        assert_eq!(l2_flow_loss(&out, &label, &all, Reduction::Mean).unwrap(), 0.0);

        let mut u = label.u().to_vec();
        let mut v = label.v().to_vec();
        u[1] += 3.0;
        v[1] += 4.0;
        u[3] += 7.0;
        let off = FlowField::new(2, 2, u, v).unwrap();
        // pixel 3 is masked out, pixel 1 carries error 5
        let mask = gt(2, 2, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(l2_flow_loss(&off, &label, &mask, Reduction::Mean).unwrap(), 1.25);
        assert_eq!(l2_flow_loss(&off, &label, &mask, Reduction::Sum).unwrap(), 5.0);
    }

    #[test]
    fn flow_loss_requires_ground_truth_label() {
        let f = FlowField::zeros(2, 2);
        let p = pred(2, 2, vec![0.0; 4]);
        assert!(l2_flow_loss(&f, &f, &p, Reduction::Mean).is_err());
        assert!(l2_flow_loss(&f, &FlowField::zeros(2, 3), &gt(2, 2, vec![0.0; 4]), Reduction::Mean).is_err());
    }

    #[test]
    fn flow_loss_graph_form_agrees() {
        let out = FlowField::from_fn(3, 3, |y, x| (x as f64 * 0.7, y as f64 - 1.0)).unwrap();
        let label = FlowField::from_fn(3, 3, |y, x| (y as f64, 0.2 * x as f64)).unwrap();
        let mask = gt(3, 3, vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::inference();
        let p = g.constant(out.to_tensor());
        let l = l2_flow_loss_var(&mut g, p, &label, &mask, Reduction::Mean);
        let want = l2_flow_loss(&out, &label, &mask, Reduction::Mean).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn tversky_examples() {
        let w = LossWeights::default();
        let label = gt(2, 4, vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let perfect = pred(2, 4, label.data().to_vec());
        assert!(tversky_loss(&perfect, &label, &w).unwrap().abs() < 1e-12);

        // all-ones prediction, p = 3 positives of n = 8
        let ones = pred(2, 4, vec![1.0; 8]);
        let tiny = LossWeights {
            smoothing: 1e-15,
            ..w
        };
        let want = 1.0 - 3.0 / (3.0 + 0.3 * 5.0);
        assert!((tversky_loss(&ones, &label, &tiny).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn tversky_needs_binary_label() {
        let soft = pred(1, 2, vec![0.2, 0.9]);
        let not_binary = ChangeMask::new(1, 2, vec![0.5, 1.0], MaskKind::Prediction).unwrap();
        assert!(tversky_loss(&soft, &not_binary, &LossWeights::default()).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.0, 10.0).unwrap(), 0.0);
        assert!((total_loss(1.5, 0.2, 10.0).unwrap() - 3.5).abs() < 1e-12);
        assert!(total_loss(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn prf_examples() {
        let g = gt(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let same = pred(2, 2, g.data().to_vec());
        let r = precision_recall_f1(&same, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let zeros = pred(2, 2, vec![0.0; 4]);
        let r = precision_recall_f1(&zeros, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        // 4×4: rows 0-1 positive in gt; prediction misses two and adds two
        let gt_data: Vec<f64> = (0..16).map(|i| (i < 8) as u8 as f64).collect();
        let mut p_data = gt_data.clone();
        p_data[0] = 0.0;
        p_data[1] = 0.0;
        p_data[8] = 1.0;
        p_data[9] = 1.0;
        let r = precision_recall_f1(&pred(4, 4, p_data), &gt(4, 4, gt_data)).unwrap();
        assert_eq!(r.counts, Counts { tp: 6, fp: 2, fn_: 2 });
        assert!((r.precision - 0.75).abs() < 1e-12);
        assert!((r.recall - 0.75).abs() < 1e-12);
        assert!((r.f1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn prf_rejects_soft_masks() {
        let g = gt(1, 2, vec![1.0, 0.0]);
        let p = pred(1, 2, vec![0.3, 0.0]);
        assert!(precision_recall_f1(&p, &g).is_err());
    }

    #[test]
    fn epe_examples() {
        let f = FlowField::from_fn(8, 8, |y, x| (x as f64 * 0.3 - 1.0, (y * x) as f64 * 0.01)).unwrap();
        assert!(epe_map(&f, &f).unwrap().data.iter().all(|&e| e == 0.0));
        let a = FlowField::new(1, 1, vec![3.0], vec![4.0]).unwrap();
        assert_eq!(epe_map(&a, &FlowField::zeros(1, 1)).unwrap().data, vec![5.0]);
        assert!(epe_map(&a, &FlowField::zeros(1, 2)).is_err());
    }

    #[test]
    fn mepe_examples() {
        let z = FlowField::zeros(4, 4);
        let m = mepe(&z, &z, 0.5).unwrap();
        assert_eq!(m.value, 0.0);
        assert!(m.undefined_motion());

        let left = FlowField::from_fn(4, 4, |_, x| if x < 2 { (1.0, 0.0) } else { (0.0, 0.0) }).unwrap();
        let m = mepe(&z, &left, 0.5).unwrap();
        assert_eq!(m.support, 8);
        assert_eq!(m.value, 1.0);
        assert!(mepe(&z, &left, -1.0).is_err());
    }

    #[test]
    fn fepe_examples() {
        assert!((fepe(0.892, 1.027, 1e-6).unwrap() - 0.86855).abs() < 1e-5);
        assert!((fepe(0.860, 2.798, 1e-6).unwrap() - 0.30736).abs() < 1e-5);
        assert_eq!(fepe(0.0, 3.0, 1e-6).unwrap(), 0.0);
        assert!(fepe(1.2, 1.0, 1e-6).is_err());
        assert!(fepe(0.5, -1.0, 1e-6).is_err());
        assert!(fepe(0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn fepe_is_monotone_on_a_grid() {
        let f1s: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let mepes: Vec<f64> = (0..=10).map(|i| i as f64 * 0.4).collect();
        for w in f1s.windows(2) {
            for &m in &mepes {
                assert!(fepe(w[1], m, 1e-6).unwrap() > fepe(w[0], m, 1e-6).unwrap());
            }
        }
        for &f in &f1s[1..] {
            for w in mepes.windows(2) {
                assert!(fepe(f, w[1], 1e-6).unwrap() < fepe(f, w[0], 1e-6).unwrap());
            }
        }
    }

    fn masks(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
        )
    }

    proptest! {
        #[test]
        fn tversky_in_unit_interval((o, l) in masks(16)) {
            let t = tversky_loss(&pred(4, 4, o), &gt(4, 4, l), &LossWeights::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&t));
        }

        #[test]
        fn half_weights_give_dice((o, l) in masks(16)) {
            let w = LossWeights { alpha: 0.5, beta: 0.5, ..LossWeights::default() };
            let t = tversky_loss(&pred(4, 4, o.clone()), &gt(4, 4, l.clone()), &w).unwrap();
            let inter: f64 = o.iter().zip(&l).map(|(a, b)| a * b).sum();
            let total: f64 = o.iter().sum::<f64>() + l.iter().sum::<f64>();
            let s = w.smoothing;
            let dice = (2.0 * inter + 2.0 * s) / (total + 2.0 * s);
            prop_assert!((t - (1.0 - dice)).abs() <= 1e-9);
        }

        #[test]
        fn masked_labels_do_not_matter(
            out in prop::collection::vec(-3.0f64..3.0, 32),
            lab in prop::collection::vec(-3.0f64..3.0, 32),
            noise in prop::collection::vec(-9.0f64..9.0, 32),
            m in prop::collection::vec(prop::bool::ANY, 16),
        ) {
            let field = |d: &[f64]| FlowField::new(4, 4, d[..16].to_vec(), d[16..].to_vec()).unwrap();
            let mask = gt(4, 4, m.iter().map(|&b| b as u8 as f64).collect());
            let mut perturbed = lab.clone();
            for i in 0..16 {
                if m[i] {
                    perturbed[i] += noise[i];
                    perturbed[16 + i] += noise[16 + i];
                }
            }
            let a = l2_flow_loss(&field(&out), &field(&lab), &mask, Reduction::Mean).unwrap();
            let b = l2_flow_loss(&field(&out), &field(&perturbed), &mask, Reduction::Mean).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn total_loss_is_linear(a in 0.0f64..5.0, b in 0.0f64..1.0, c in 0.0f64..5.0, d in 0.0f64..1.0) {
            let lhs = total_loss(a, b, 10.0).unwrap() + total_loss(c, d, 10.0).unwrap();
            prop_assert!((lhs - total_loss(a + c, b + d, 10.0).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn f1_is_harmonic_mean(tp in 1u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let p = Prf::from(Counts { tp, fp, fn_ });
            prop_assert!((p.f1 - 2.0 / (1.0 / p.precision + 1.0 / p.recall)).abs() < 1e-12);
        }

        #[test]
        fn zero_threshold_mepe_matches_loop(
            a in prop::collection::vec(-2.0f64..2.0, 32),
            b in prop::collection::vec(-2.0f64..2.0, 32),
            still in prop::collection::vec(prop::bool::ANY, 16),
        ) {
            let mut b = b;
            let mut a = a;
            for i in 0..16 {
                if still[i] {
                    a[i] = 0.0; a[16 + i] = 0.0; b[i] = 0.0; b[16 + i] = 0.0;
                }
            }
            let f = FlowField::new(4, 4, a[..16].to_vec(), a[16..].to_vec()).unwrap();
            let g = FlowField::new(4, 4, b[..16].to_vec(), b[16..].to_vec()).unwrap();
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..16 {
                let moving = a[i] != 0.0 || a[16 + i] != 0.0 || b[i] != 0.0 || b[16 + i] != 0.0;
                if moving {
                    sum += ((a[i] - b[i]).powi(2) + (a[16 + i] - b[16 + i]).powi(2)).sqrt();
                    n += 1;
                }
            }
            let m = mepe(&f, &g, 0.0).unwrap();
            prop_assert_eq!(m.support, n);
            let want = if n == 0 { 0.0 } else { sum / n as f64 };
            prop_assert!((m.value - want).abs() < 1e-12);
        }

        #[test]
        fn mepe_symmetric_on_shared_support(
            a in prop::collection::vec(0.6f64..3.0, 16),
            b in prop::collection::vec(0.6f64..3.0, 16),
        ) {
            let f = FlowField::new(2, 8, a.clone(), vec![0.0; 16]).unwrap();
            let g = FlowField::new(2, 8, b.clone(), vec![0.0; 16]).unwrap();
            prop_assert_eq!(mepe(&f, &g, 0.5).unwrap(), mepe(&g, &f, 0.5).unwrap());
        }
    }
}
