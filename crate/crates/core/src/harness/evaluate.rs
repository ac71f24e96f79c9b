//! Metric evaluation over a sample set.

use crate::domain::{binarize, BitemporalSample};
use crate::error::{ensure, Result};
use crate::objectives::{mepe, precision_recall_f1, MetricReport, SampleError, SampleMetrics};
use crate::par::{self, Execution};

use super::config::{BranchSelector, EvalConfig};
use super::model::{JointNet, Prediction};

/// Anything that maps a sample to flow and / or change predictions.
pub trait Predictor: Sync {
    fn predict(&self, sample: &BitemporalSample) -> Result<Prediction>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a JointNet,
    pub branch: BranchSelector,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, sample: &BitemporalSample) -> Result<Prediction> {
        self.model.predict(sample, self.branch)
    }
}

/// Returns the labels themselves.
pub struct LabelOracle;

impl Predictor for LabelOracle {
    fn predict(&self, sample: &BitemporalSample) -> Result<Prediction> {
        Ok(Prediction {
            flow: Some(sample.flow_label.clone()),
            change: Some(sample.change_label.clone()),
        })
    }
}

fn sample_metrics(p: &impl Predictor, s: &BitemporalSample, cfg: &EvalConfig) -> Result<SampleMetrics> {
    let pred = p.predict(s)?;
    let change = match &pred.change {
        Some(c) => Some(precision_recall_f1(&binarize(c, cfg.threshold)?, &s.change_label)?),
        None => None,
    };
    let flow = match &pred.flow {
        Some(f) => Some(mepe(f, &s.flow_label, cfg.delta)?),
        None => None,
    };
    SampleMetrics::new(s.id.clone(), change, flow, cfg.epsilon)
}

/// Per-sample and aggregate metrics. Samples that fail (for instance on a
/// shape mismatch) are listed in `errors` and left out of the aggregate.
pub fn evaluate(
    predictor: &impl Predictor,
    samples: &[BitemporalSample],
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<MetricReport> {
    ensure!(!samples.is_empty(), "evaluation set is empty");
    let results = par::map_ordered(exec, samples, |_, s| sample_metrics(predictor, s, cfg));
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(m) => ok.push(m),
            Err(e) => {
                log::warn!("sample {} skipped: {e}", s.id);
                errors.push(SampleError {
                    id: s.id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    MetricReport::from_samples(ok, errors, cfg.epsilon, cfg.delta, cfg.threshold)
}

/// Header line in the column order F1, mEPE, FEPE.
pub fn metric_header() -> &'static str {
    "F1 mEPE FEPE"
}

/// Aggregate values under [`metric_header`]; absent metrics print as `-`.
pub fn metric_line(report: &MetricReport) -> String {
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    let a = &report.aggregate;
    format!("{} {} {}", cell(a.f1()), cell(a.mepe), cell(a.fepe))
}
