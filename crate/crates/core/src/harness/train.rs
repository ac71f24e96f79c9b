//! Joint training loop with per-branch learning rates.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{binarize, BitemporalSample, ChangeMask, FlowField, MaskKind};
use crate::error::{ensure, Error, Result};
use crate::nn::{AdamW, Graph, ParamGrads, Var};
use crate::objectives::{confusion_counts, l2_flow_loss_var, mepe, tversky_loss_var, Counts, Mepe, Prf};
use crate::par;

use super::checkpoint::Checkpoint;
use super::config::{BranchSelector, RunConfig};
use super::model::{JointNet, OF_PREFIX};

/// Per-epoch training summary. Metrics come from the forward passes of the
/// epoch, i.e. before each batch's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l2: Option<f64>,
    pub tversky: Option<f64>,
    pub f1: Option<f64>,
    pub mepe: Option<f64>,
    /// Mean pre-clipping gradient norm over the epoch's batches.
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Loss, its components, metrics and gradients for one sample.
pub struct SampleStep {
    pub loss: f64,
    pub l2: Option<f64>,
    pub tversky: Option<f64>,
    pub counts: Option<Counts>,
    pub mepe: Option<Mepe>,
    pub grads: ParamGrads,
}

/// Forward and backward pass for one sample.
///
/// `both` minimizes `l2 + ψ·tversky`, `of_only` the flow term and `cd_only`
/// the Tversky term.
pub fn sample_step(model: &JointNet, sample: &BitemporalSample, cfg: &RunConfig) -> Result<SampleStep> {
    let branch = cfg.train.branch;
    let mut g = Graph::new();
    let t0 = g.constant(sample.t0.to_tensor());
    let t1 = g.constant(sample.t1.to_tensor());
    let ps = &model.params;
    let trace = model.forward_graph(&mut g, ps, t0, t1, branch, cfg.train.iteration_supervision);
    let reduction = cfg.train.reduction;
    let l2 = trace.flow.map(|flow| {
        if cfg.train.iteration_supervision {
            let n = trace.flow_iterates.len();
            let terms: Vec<(Var, f64)> = trace
                .flow_iterates
                .iter()
                .enumerate()
                .map(|(k, &f)| {
                    let l = l2_flow_loss_var(&mut g, f, &sample.flow_label, &sample.change_label, reduction);
                    (l, cfg.train.iteration_gamma.powi((n - 1 - k) as i32))
                })
                .collect();
            g.lincomb(&terms)
        } else {
            l2_flow_loss_var(&mut g, flow, &sample.flow_label, &sample.change_label, reduction)
        }
    });
    let tv = trace
        .change
        .map(|c| tversky_loss_var(&mut g, c, &sample.change_label, &cfg.loss));
    let loss = match (branch, l2, tv) {
        (BranchSelector::Both, Some(a), Some(b)) => g.lincomb(&[(a, 1.0), (b, cfg.loss.psi)]),
        (BranchSelector::OfOnly, Some(a), _) => a,
        (BranchSelector::CdOnly, _, Some(b)) => b,
        _ => unreachable!("branch selector and trace agree"),
    };
    let loss_value = g.value(loss).item();
    let l2_value = l2.map(|v| g.value(v).item());
    let tv_value = tv.map(|v| g.value(v).item());
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss on sample {}: total {loss_value}, l2 {l2_value:?}, tversky {tv_value:?}",
            sample.id
        )));
    }
    let grads = g.backward(loss);
    let mut pg = ParamGrads::new(ps.len());
    for (id, t) in grads.params() {
        pg.add(id, t);
    }
    let counts = match trace.change {
        Some(c) => {
            let probs = ChangeMask::new(
                sample.height(),
                sample.width(),
                g.value(c).data().to_vec(),
                MaskKind::Prediction,
            )?;
            Some(confusion_counts(&binarize(&probs, cfg.eval.threshold)?, &sample.change_label)?)
        }
        None => None,
    };
    let flow_metric = match trace.flow {
        Some(f) => Some(mepe(&FlowField::from_tensor(g.value(f))?, &sample.flow_label, cfg.eval.delta)?),
        None => None,
    };
    Ok(SampleStep {
        loss: loss_value,
        l2: l2_value,
        tversky: tv_value,
        counts,
        mepe: flow_metric,
        grads: pg,
    })
}

/// Learning rate of every parameter, by branch prefix.
pub fn learning_rates(model: &JointNet, cfg: &RunConfig) -> Vec<f64> {
    model
        .params
        .iter()
        .map(|(_, name, _)| {
            if name.starts_with(OF_PREFIX) {
                cfg.train.of_lr
            } else {
                cfg.train.cd_lr
            }
        })
        .collect()
}

#[derive(Default)]
struct EpochAccumulator {
    loss: f64,
    l2: Option<f64>,
    tversky: Option<f64>,
    counts: Option<Counts>,
    mepe_sum: f64,
    mepe_n: usize,
    flow_seen: bool,
    grad_norm: f64,
    batches: usize,
    samples: usize,
}

impl EpochAccumulator {
    fn add(&mut self, s: &SampleStep) {
        self.loss += s.loss;
        if let Some(v) = s.l2 {
            *self.l2.get_or_insert(0.0) += v;
        }
        if let Some(v) = s.tversky {
            *self.tversky.get_or_insert(0.0) += v;
        }
        if let Some(c) = s.counts {
            self.counts = Some(self.counts.unwrap_or_default().add(c));
        }
        if let Some(m) = s.mepe {
            self.flow_seen = true;
            if !m.undefined_motion() {
                self.mepe_sum += m.value;
                self.mepe_n += 1;
            }
        }
        self.samples += 1;
    }

    fn finish(self, epoch: usize, seconds: f64) -> EpochRecord {
        let n = self.samples.max(1) as f64;
        EpochRecord {
            epoch,
            loss: self.loss / n,
            l2: self.l2.map(|v| v / n),
            tversky: self.tversky.map(|v| v / n),
            f1: self.counts.map(|c| Prf::from(c).f1),
            mepe: self.flow_seen.then(|| {
                if self.mepe_n == 0 {
                    0.0
                } else {
                    self.mepe_sum / self.mepe_n as f64
                }
            }),
            grad_norm: self.grad_norm / self.batches.max(1) as f64,
            seconds,
        }
    }
}

/// Trains from freshly initialized weights. `on_epoch` sees every record as
/// it is produced. With `epochs = 0` the returned checkpoint holds the
/// initial weights and one record of their metrics.
pub fn train(
    cfg: &RunConfig,
    samples: &[BitemporalSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    ensure!(!samples.is_empty(), "training set is empty");
    let mut model = JointNet::new(cfg.model.clone(), cfg.train.seed)?;
    let mut opt = AdamW::new(cfg.train.optimizer, &model.params);
    let lrs = learning_rates(&model, cfg);
    let exec = cfg.train.execution;
    let mut history = Vec::new();

    if cfg.train.epochs == 0 {
        let start = Instant::now();
        let mut acc = EpochAccumulator::default();
        for s in par::map_ordered(exec, samples, |_, s| sample_step(&model, s, cfg)) {
            acc.add(&s?);
        }
        let rec = acc.finish(0, start.elapsed().as_secs_f64());
        on_epoch(&rec);
        history.push(rec);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        let start = Instant::now();
        if cfg.train.shuffle {
            order.shuffle(&mut rng);
        }
        let mut acc = EpochAccumulator::default();
        for batch in order.chunks(cfg.train.batch_size) {
            let steps = par::map_ordered(exec, batch, |_, &i| sample_step(&model, &samples[i], cfg));
            let mut grads = ParamGrads::new(model.params.len());
            for s in steps {
                let s = s.map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                grads.merge(&s.grads);
                acc.add(&s);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| samples[i].id.as_str()).collect();
                return Err(Error::Numerical(format!(
                    "epoch {epoch}: non-finite gradient in batch {ids:?}"
                )));
            }
            let norm = if cfg.train.clip_norm > 0.0 {
                grads.clip_global_norm(cfg.train.clip_norm)
            } else {
                grads.global_norm()
            };
            acc.grad_norm += norm;
            acc.batches += 1;
            opt.step(&mut model.params, &grads, |id| lrs[id.index()]);
        }
        let rec = acc.finish(epoch, start.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: loss {:.5} f1 {:?} mepe {:?}",
            rec.loss,
            rec.f1,
            rec.mepe
        );
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        epoch: cfg.train.epochs,
        history,
        model,
        optimizer: Some(opt),
    })
}

/// Training curve as CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss", "l2", "tversky", "f1", "mepe", "grad_norm", "seconds"])
        .expect("in-memory write");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            opt(r.l2),
            opt(r.tversky),
            opt(r.f1),
            opt(r.mepe),
            r.grad_norm.to_string(),
            r.seconds.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
