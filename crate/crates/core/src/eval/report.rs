use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bootstrap::bootstrap_ci;
use super::decision::DecisionPoint;
use super::metrics::{pr_curve, roc_curve};
use super::{Cohort, Metric};
use crate::error::{MomeError, Result};

pub const REPORT_SCHEMA: &str = "mome-report/1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub n: usize,
    pub n_positive: usize,
    pub n_boot: usize,
    pub seed: u64,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modalities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tta: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCase {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

/// Metric name to point estimate and 95% interval; `null` when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub metrics: BTreeMap<String, Option<MetricCi>>,
    pub meta: ReportMeta,
    pub cases: Vec<ReportCase>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MomeError::invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text).map_err(|e| MomeError::data(format!("report: {e}")))?;
        if r.schema != REPORT_SCHEMA {
            return Err(MomeError::data(format!("unsupported report schema {:?}", r.schema)));
        }
        Ok(r)
    }

    pub fn point(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied().flatten().map(|m| m.point)
    }

    /// The scored cases as a cohort, for paired comparisons.
    pub fn cohort(&self) -> Result<Cohort> {
        Cohort::new(
            self.cases
                .iter()
                .map(|c| super::ScoredCase {
                    id: c.id.clone(),
                    score: c.score,
                    label: c.label,
                    tags: BTreeMap::new(),
                })
                .collect(),
        )
    }
}

fn metric_ci(m: Metric, scores: &[f64], labels: &[u8], threshold: f64, n_boot: usize, seed: u64) -> Option<MetricCi> {
    m.compute(scores, labels, threshold)?;
    let ci = bootstrap_ci(
        scores.len(),
        |idx| m.on_indices(scores, labels, threshold, idx),
        n_boot,
        seed,
    )
    .ok()?;
    Some(MetricCi {
        point: ci.point,
        lo: ci.lo,
        hi: ci.hi,
    })
}

fn metrics_for(
    metrics: &[Metric],
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    n_boot: usize,
    seed: u64,
) -> BTreeMap<String, Option<MetricCi>> {
    metrics
        .iter()
        .map(|&m| {
            (
                m.name().to_string(),
                metric_ci(m, scores, labels, threshold, n_boot, seed),
            )
        })
        .collect()
}

/// Every metric with bootstrap intervals, plus the per-case scores.
pub fn evaluate(cohort: &Cohort, threshold: f64, n_boot: usize, seed: u64) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MomeError::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    if n_boot < 2 {
        return Err(MomeError::invalid(format!("n_boot {n_boot} must be >= 2")));
    }
    let (scores, labels) = (cohort.scores(), cohort.labels());
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        metrics: metrics_for(&Metric::ALL, &scores, &labels, threshold, n_boot, seed),
        meta: ReportMeta {
            n: cohort.len(),
            n_positive: labels.iter().filter(|&&l| l == 1).count(),
            n_boot,
            seed,
            threshold,
            modalities: None,
            tta: None,
        },
        cases: cohort
            .cases()
            .iter()
            .map(|c| ReportCase {
                id: c.id.clone(),
                score: c.score,
                label: c.label,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub n: usize,
    pub n_positive: usize,
    pub metrics: BTreeMap<String, Option<MetricCi>>,
}

/// AUROC, AUPRC, sensitivity and specificity with intervals per value of
/// `tag_key`. Metrics undefined within a group are `None`.
pub fn subgroup_report(
    cohort: &Cohort,
    tag_key: &str,
    threshold: f64,
    n_boot: usize,
    seed: u64,
) -> Result<BTreeMap<String, GroupReport>> {
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for c in cohort.cases() {
        let v = c
            .tags
            .get(tag_key)
            .ok_or_else(|| MomeError::invalid(format!("case {} has no tag {tag_key:?}", c.id)))?;
        let g = groups.entry(v.clone()).or_default();
        g.0.push(c.score);
        g.1.push(c.label);
    }
    let chosen = [Metric::Auroc, Metric::Auprc, Metric::Sensitivity, Metric::Specificity];
    Ok(groups
        .into_iter()
        .map(|(value, (s, l))| {
            let report = GroupReport {
                n: s.len(),
                n_positive: l.iter().filter(|&&x| x == 1).count(),
                metrics: metrics_for(&chosen, &s, &l, threshold, n_boot, seed),
            };
            (value, report)
        })
        .collect())
}

pub fn roc_csv(cohort: &Cohort) -> Result<String> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for (t, f, p) in roc_curve(&cohort.scores(), &cohort.labels())? {
        writeln!(out, "{t},{f},{p}").expect("string write");
    }
    Ok(out)
}

pub fn pr_csv(cohort: &Cohort) -> Result<String> {
    let mut out = String::from("threshold,recall,precision\n");
    for (t, r, p) in pr_curve(&cohort.scores(), &cohort.labels())? {
        writeln!(out, "{t},{r},{p}").expect("string write");
    }
    Ok(out)
}

pub fn decision_csv(curve: &[DecisionPoint]) -> String {
    let mut out = String::from("threshold,net_benefit,lo,hi,all,none\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in curve {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.threshold,
            p.model,
            opt(p.lo),
            opt(p.hi),
            p.all,
            p.none
        )
        .expect("string write");
    }
    out
}
