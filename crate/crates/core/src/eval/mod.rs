//! Classifier evaluation: threshold and rank metrics, bootstrap intervals and
//! p-values, decision curves, subgroups, operating points, reader comparison.

mod bootstrap;
mod decision;
mod metrics;
mod operating;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bootstrap::{
    bootstrap_ci, bootstrap_pvalue, nearest_rank, paired_bootstrap, resample_indices, Interval, PairedDifference,
};
pub use decision::{decision_curve, decision_curve_with_ci, net_benefit, DecisionPoint, Scenario};
pub use metrics::{
    auprc, auroc, confusion_metrics, partial_auroc, pr_curve, roc_curve, Confusion, ConfusionMetrics, PartialRegion,
};
pub use operating::{
    compare_cohorts, operating_point_transfer, reader_compare, select_threshold, OperatingPoint, OperatingRule,
    ReaderComparison,
};
pub use report::{
    decision_csv, evaluate, pr_csv, roc_csv, subgroup_report, EvalReport, GroupReport, MetricCi, ReportMeta,
    REPORT_SCHEMA,
};

use crate::error::{MomeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub id: String,
    pub score: f64,
    pub label: u8,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

/// Scored cases in a stable order.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    cases: Vec<ScoredCase>,
}

impl Cohort {
    pub fn new(cases: Vec<ScoredCase>) -> Result<Self> {
        if cases.is_empty() {
            return Err(MomeError::invalid("empty cohort"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &cases {
            if !c.score.is_finite() {
                return Err(MomeError::invalid(format!("case {}: non-finite score", c.id)));
            }
            if c.label > 1 {
                return Err(MomeError::invalid(format!(
                    "case {}: label {} is not 0 or 1",
                    c.id, c.label
                )));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(MomeError::invalid(format!("duplicate case id {}", c.id)));
            }
        }
        Ok(Cohort { cases })
    }

    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(MomeError::invalid("scores and labels differ in length"));
        }
        Cohort::new(
            scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&score, &label))| ScoredCase {
                    id: format!("case-{i}"),
                    score,
                    label,
                    tags: BTreeMap::new(),
                })
                .collect(),
        )
    }

    pub fn cases(&self) -> &[ScoredCase] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.cases.iter().map(|c| c.score).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.cases.iter().map(|c| c.label).collect()
    }

    pub fn filter(&self, keep: impl Fn(&ScoredCase) -> bool) -> Option<Cohort> {
        let cases: Vec<ScoredCase> = self.cases.iter().filter(|c| keep(c)).cloned().collect();
        (!cases.is_empty()).then_some(Cohort { cases })
    }
}

/// The metrics reported for every evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Auroc,
    Auprc,
    PaurocSens90,
    PaurocSpec90,
    Accuracy,
    F1,
    Sensitivity,
    Specificity,
    Ppv,
    Npv,
    Mcc,
}

impl Metric {
    pub const ALL: [Metric; 11] = [
        Metric::Auroc,
        Metric::Auprc,
        Metric::PaurocSens90,
        Metric::PaurocSpec90,
        Metric::Accuracy,
        Metric::F1,
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Ppv,
        Metric::Npv,
        Metric::Mcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
            Metric::PaurocSens90 => "pauroc_sens90",
            Metric::PaurocSpec90 => "pauroc_spec90",
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Ppv => "ppv",
            Metric::Npv => "npv",
            Metric::Mcc => "mcc",
        }
    }

    pub fn from_name(name: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Value on the given cases; `None` when undefined.
    pub fn compute(self, scores: &[f64], labels: &[u8], threshold: f64) -> Option<f64> {
        let cm = || Confusion::at(scores, labels, threshold).metrics();
        match self {
            Metric::Auroc => auroc(scores, labels).ok(),
            Metric::Auprc => auprc(scores, labels).ok(),
            Metric::PaurocSens90 => partial_auroc(scores, labels, PartialRegion::MinSensitivity(0.9))
                .ok()
                .flatten(),
            Metric::PaurocSpec90 => partial_auroc(scores, labels, PartialRegion::MinSpecificity(0.9))
                .ok()
                .flatten(),
            Metric::Accuracy => cm().accuracy,
            Metric::F1 => cm().f1,
            Metric::Sensitivity => cm().sensitivity,
            Metric::Specificity => cm().specificity,
            Metric::Ppv => cm().ppv,
            Metric::Npv => cm().npv,
            Metric::Mcc => cm().mcc,
        }
    }

    /// Value on the resample `idx` of the given cases.
    pub fn on_indices(self, scores: &[f64], labels: &[u8], threshold: f64, idx: &[usize]) -> Option<f64> {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        self.compute(&s, &l, threshold)
    }
}
