use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bootstrap::{paired_bootstrap, PairedDifference};
use super::metrics::{Confusion, ConfusionMetrics};
use super::{Cohort, Metric};
use crate::error::{MomeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatingRule {
    /// Largest threshold keeping sensitivity at or above the target.
    MinSensitivity(f64),
    /// Smallest threshold keeping specificity at or above the target.
    MinSpecificity(f64),
}

/// Candidate thresholds: 0, 1 and the midpoints between consecutive
/// distinct scores.
fn candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c = vec![0.0];
    c.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c.push(1.0);
    c
}

/// Threshold chosen on a development cohort (positive iff `score > t`).
pub fn select_threshold(scores: &[f64], labels: &[u8], rule: OperatingRule) -> Result<f64> {
    let cands = candidates(scores);
    let value = |t: f64| {
        let m = Confusion::at(scores, labels, t).metrics();
        match rule {
            OperatingRule::MinSensitivity(_) => m.sensitivity,
            OperatingRule::MinSpecificity(_) => m.specificity,
        }
    };
    let (target, pick) = match rule {
        OperatingRule::MinSensitivity(s) => (s, cands.iter().rev().copied().find(|&t| value(t) >= Some(s))),
        OperatingRule::MinSpecificity(s) => (s, cands.iter().copied().find(|&t| value(t) >= Some(s))),
    };
    pick.ok_or_else(|| {
        let best = cands.iter().filter_map(|&t| value(t)).fold(f64::NEG_INFINITY, f64::max);
        MomeError::invalid(format!(
            "operating rule {rule:?} unsatisfiable (target {target}, best achievable {best})"
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub rule: OperatingRule,
    pub threshold: f64,
    pub dev: Confusion,
    pub apply: Confusion,
    pub apply_metrics: ConfusionMetrics,
    /// Negative cases of the apply cohort at or below the threshold.
    pub downgraded_benign: usize,
    /// Positive cases of the apply cohort at or below the threshold.
    pub missed_positive: usize,
}

/// Select a threshold on `dev` and apply it unchanged to `apply`.
pub fn operating_point_transfer(dev: &Cohort, apply: &Cohort, rule: OperatingRule) -> Result<OperatingPoint> {
    let (ds, dl) = (dev.scores(), dev.labels());
    let threshold = select_threshold(&ds, &dl, rule)?;
    let (s, l) = (apply.scores(), apply.labels());
    let applied = Confusion::at(&s, &l, threshold);
    Ok(OperatingPoint {
        rule,
        threshold,
        dev: Confusion::at(&ds, &dl, threshold),
        apply: applied,
        apply_metrics: applied.metrics(),
        downgraded_benign: applied.tn,
        missed_positive: applied.fn_,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderComparison {
    pub model: ConfusionMetrics,
    pub reader: ConfusionMetrics,
    /// Model minus reader.
    pub f1: PairedDifference,
    pub mcc: PairedDifference,
}

fn confusion_on(idx: &[usize], labels: &[u8], calls: &[bool]) -> Confusion {
    Confusion::from_calls(
        &idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        idx.iter().map(|&i| calls[i]),
    )
}

/// Paired bootstrap of model-minus-reader F1 and MCC on the same cases;
/// the model calls positive iff `score > threshold`.
pub fn reader_compare(
    cohort: &Cohort,
    reader_calls: &[bool],
    threshold: f64,
    n_boot: usize,
    seed: u64,
) -> Result<ReaderComparison> {
    if reader_calls.len() != cohort.len() {
        return Err(MomeError::invalid(format!(
            "{} reader calls for {} cases",
            reader_calls.len(),
            cohort.len()
        )));
    }
    let labels = cohort.labels();
    let model_calls: Vec<bool> = cohort.scores().iter().map(|&s| s > threshold).collect();
    let n = cohort.len();
    let diff = |pick: fn(ConfusionMetrics) -> Option<f64>| {
        paired_bootstrap(
            n,
            |idx| pick(confusion_on(idx, &labels, &model_calls).metrics()),
            |idx| pick(confusion_on(idx, &labels, reader_calls).metrics()),
            n_boot,
            seed,
        )
    };
    Ok(ReaderComparison {
        model: Confusion::from_calls(&labels, model_calls.iter().copied()).metrics(),
        reader: Confusion::from_calls(&labels, reader_calls.iter().copied()).metrics(),
        f1: diff(|m| m.f1)?,
        mcc: diff(|m| m.mcc)?,
    })
}

/// Paired bootstrap differences `a − b` for each metric, over cases matched
/// by id in the same order.
pub fn compare_cohorts(
    a: &Cohort,
    b: &Cohort,
    metrics: &[Metric],
    threshold: f64,
    n_boot: usize,
    seed: u64,
) -> Result<BTreeMap<String, PairedDifference>> {
    let (ca, cb) = (a.cases(), b.cases());
    for i in 0..ca.len().max(cb.len()) {
        let (x, y) = (ca.get(i), cb.get(i));
        if x.map(|c| (&c.id, c.label)) != y.map(|c| (&c.id, c.label)) {
            let id = |c: Option<&super::ScoredCase>| c.map_or("<none>".to_string(), |c| c.id.clone());
            return Err(MomeError::data(format!(
                "case mismatch at position {i}: {} vs {}",
                id(x),
                id(y)
            )));
        }
    }
    let (sa, sb, l) = (a.scores(), b.scores(), a.labels());
    let mut out = BTreeMap::new();
    for &m in metrics {
        let d = paired_bootstrap(
            a.len(),
            |idx| m.on_indices(&sa, &l, threshold, idx),
            |idx| m.on_indices(&sb, &l, threshold, idx),
            n_boot,
            seed,
        )?;
        out.insert(m.name().to_string(), d);
    }
    Ok(out)
}
