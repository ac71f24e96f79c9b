//! Branch ablation: the same recipe trained with the flow branch only, the
//! change branch only, and both.

use serde::{Deserialize, Serialize};

use crate::domain::BitemporalSample;
use crate::error::Result;

use super::config::{BranchSelector, RunConfig};
use super::evaluate::{evaluate, ModelPredictor};
use super::train::train;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub branch: BranchSelector,
    pub f1: Option<f64>,
    pub mepe: Option<f64>,
    pub fepe: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, branch: BranchSelector) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.branch == branch)
    }

    /// Rows with branch check marks and `-` for blank cells.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "-" };
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let mut out = format!(
            "{:<9} {:<9} {:>7} {:>7} {:>7}\n",
            "OFbranch", "CDbranch", "F1", "mEPE", "FEPE"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<9} {:<9} {:>7} {:>7} {:>7}\n",
                mark(r.branch.uses_flow()),
                mark(r.branch.uses_change()),
                cell(r.f1),
                cell(r.mepe),
                cell(r.fepe)
            ));
        }
        out
    }

    /// Whether the joint model beats both single-branch rows on F1 and mEPE.
    pub fn joint_is_better(&self) -> Option<bool> {
        let both = self.row(BranchSelector::Both)?;
        let of = self.row(BranchSelector::OfOnly)?;
        let cd = self.row(BranchSelector::CdOnly)?;
        Some(both.f1? > cd.f1? && both.mepe? < of.mepe?)
    }
}

/// Three runs differing only in the branch selector, each evaluated on `eval`.
pub fn ablate(cfg: &RunConfig, train_set: &[BitemporalSample], eval: &[BitemporalSample]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(3);
    for branch in BranchSelector::ALL {
        let mut c = cfg.clone();
        c.train.branch = branch;
        log::info!("ablation run: {}", branch.name());
        let ckpt = train(&c, train_set, |_| {})?;
        let predictor = ModelPredictor {
            model: &ckpt.model,
            branch,
        };
        let report = evaluate(&predictor, eval, &c.eval, c.train.execution)?;
        let a = &report.aggregate;
        rows.push(AblationRow {
            branch,
            f1: a.f1(),
            mepe: a.mepe,
            fepe: a.fepe,
            final_loss: ckpt.history.last().map(|r| r.loss),
        });
    }
    Ok(AblationTable { rows })
}
