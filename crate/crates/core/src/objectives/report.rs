//! Per-sample and aggregate metric records with JSON and CSV output.
//!
//! Change metrics are absent when no change map was predicted and flow
//! metrics are absent when no flow was predicted; FEPE needs both.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fepe, Counts, Mepe, Prf};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub change: Option<Prf>,
    pub flow: Option<Mepe>,
    pub fepe: Option<f64>,
}

impl SampleMetrics {
    pub fn new(id: impl Into<String>, change: Option<Prf>, flow: Option<Mepe>, eps: f64) -> Result<Self> {
        let fepe = match (change, flow) {
            (Some(c), Some(f)) => Some(fepe(c.f1, f.value, eps)?),
            _ => None,
        };
        Ok(SampleMetrics {
            id: id.into(),
            change,
            flow,
            fepe,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// From counts summed over all samples.
    pub change: Option<Prf>,
    /// Mean of per-sample mEPE over samples with moving pixels.
    pub mepe: Option<f64>,
    /// No sample had moving pixels; `mepe` is then 0.
    pub undefined_motion: bool,
    pub fepe: Option<f64>,
}

impl Aggregate {
    pub fn f1(&self) -> Option<f64> {
        self.change.map(|c| c.f1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
    pub errors: Vec<SampleError>,
    pub epsilon: f64,
    pub delta: f64,
    pub threshold: f64,
}

impl MetricReport {
    pub fn from_samples(
        samples: Vec<SampleMetrics>,
        errors: Vec<SampleError>,
        epsilon: f64,
        delta: f64,
        threshold: f64,
    ) -> Result<Self> {
        let change = if samples.iter().any(|s| s.change.is_some()) {
            let counts = samples
                .iter()
                .filter_map(|s| s.change.map(|c| c.counts))
                .fold(Counts::default(), Counts::add);
            Some(Prf::from(counts))
        } else {
            None
        };
        let flows: Vec<Mepe> = samples.iter().filter_map(|s| s.flow).collect();
        let moving: Vec<f64> = flows.iter().filter(|m| !m.undefined_motion()).map(|m| m.value).collect();
        let undefined_motion = !flows.is_empty() && moving.is_empty();
        let mepe = if flows.is_empty() {
            None
        } else if moving.is_empty() {
            Some(0.0)
        } else {
            Some(moving.iter().sum::<f64>() / moving.len() as f64)
        };
        let fepe = match (change, mepe) {
            (Some(c), Some(m)) => Some(fepe(c.f1, m, epsilon)?),
            _ => None,
        };
        Ok(MetricReport {
            samples,
            aggregate: Aggregate {
                change,
                mepe,
                undefined_motion,
                fepe,
            },
            errors,
            epsilon,
            delta,
            threshold,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    /// One row per sample followed by an `aggregate` row; absent metrics are empty cells.
    pub fn to_csv(&self) -> String {
        fn cell<T: ToString>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        fn row(id: &str, c: Option<Prf>, mepe: Option<f64>, fepe: Option<f64>, undefined: Option<bool>) -> Vec<String> {
            vec![
                id.to_string(),
                cell(c.map(|c| c.precision)),
                cell(c.map(|c| c.recall)),
                cell(c.map(|c| c.f1)),
                cell(c.map(|c| c.counts.tp)),
                cell(c.map(|c| c.counts.fp)),
                cell(c.map(|c| c.counts.fn_)),
                cell(mepe),
                cell(fepe),
                cell(undefined),
            ]
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = ["id", "precision", "recall", "f1", "tp", "fp", "fn", "mepe", "fepe", "undefined_motion"];
        w.write_record(header).expect("in-memory write");
        for s in &self.samples {
            let r = row(
                &s.id,
                s.change,
                s.flow.map(|m| m.value),
                s.fepe,
                s.flow.map(|m| m.undefined_motion()),
            );
            w.write_record(r).expect("in-memory write");
        }
        let a = &self.aggregate;
        let undefined = a.mepe.map(|_| a.undefined_motion);
        w.write_record(row("aggregate", a.change, a.mepe, a.fepe, undefined))
            .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("metrics.json", self.to_json()), ("metrics.csv", self.to_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, counts: Option<Counts>, mepe: Option<(f64, usize)>) -> SampleMetrics {
        SampleMetrics::new(
            id,
            counts.map(Prf::from),
            mepe.map(|(value, support)| Mepe { value, support }),
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn aggregate_sums_counts_and_skips_still_samples() {
        let samples = vec![
            sample("a", Some(Counts { tp: 3, fp: 1, fn_: 0 }), Some((1.0, 10))),
            sample("b", Some(Counts { tp: 1, fp: 0, fn_: 3 }), Some((0.0, 0))),
            sample("c", Some(Counts { tp: 2, fp: 1, fn_: 1 }), Some((2.0, 4))),
        ];
        let r = MetricReport::from_samples(samples, vec![], 1e-6, 0.5, 0.5).unwrap();
        let c = r.aggregate.change.unwrap();
        assert_eq!(c.counts, Counts { tp: 6, fp: 2, fn_: 4 });
        assert_eq!(r.aggregate.mepe, Some(1.5));
        assert!(!r.aggregate.undefined_motion);
        let want = c.f1 / (1.5 + 1e-6);
        assert!((r.aggregate.fepe.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn all_still_is_flagged() {
        let samples = vec![sample("a", None, Some((0.0, 0)))];
        let r = MetricReport::from_samples(samples, vec![], 1e-6, 0.5, 0.5).unwrap();
        assert_eq!(r.aggregate.mepe, Some(0.0));
        assert!(r.aggregate.undefined_motion);
        assert_eq!(r.aggregate.fepe, None);
        assert_eq!(r.aggregate.f1(), None);
    }

    #[test]
    fn csv_leaves_absent_metrics_blank() {
        let samples = vec![
            sample("flow_only", None, Some((0.25, 3))),
            sample("change_only", Some(Counts { tp: 1, fp: 1, fn_: 0 }), None),
        ];
        let r = MetricReport::from_samples(samples, vec![], 1e-6, 0.5, 0.5).unwrap();
        let text = r.to_csv();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(&rows[0][0], "flow_only");
        assert_eq!(&rows[0][3], "");
        assert_eq!(&rows[0][7], "0.25");
        assert_eq!(&rows[1][7], "");
        assert_eq!(&rows[1][8], "");
        assert_eq!(&rows[2][0], "aggregate");
    }

    #[test]
    fn json_round_trips() {
        let samples = vec![sample("x", Some(Counts { tp: 2, fp: 0, fn_: 1 }), Some((0.5, 7)))];
        let errors = vec![SampleError {
            id: "y".into(),
            message: "bad".into(),
        }];
        let r = MetricReport::from_samples(samples, errors, 1e-6, 0.5, 0.5).unwrap();
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn write_creates_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricReport::from_samples(vec![sample("x", None, Some((1.0, 1)))], vec![], 1e-6, 0.5, 0.5).unwrap();
        r.write(&dir.path().join("out")).unwrap();
        assert!(dir.path().join("out/metrics.json").is_file());
        assert!(dir.path().join("out/metrics.csv").is_file());
    }
}
