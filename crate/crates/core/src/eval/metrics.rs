use serde::{Deserialize, Serialize};

use crate::error::{MomeError, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MomeError::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(MomeError::invalid("empty cohort"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MomeError::invalid(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(MomeError::invalid(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

fn counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// Counts with a case predicted positive iff `score > threshold`.
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        Self::from_calls(labels, scores.iter().map(|&s| s > threshold))
    }

    /// Counts with a case predicted positive iff `score >= threshold`.
    pub fn at_inclusive(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        Self::from_calls(labels, scores.iter().map(|&s| s >= threshold))
    }

    pub fn from_calls(labels: &[u8], calls: impl IntoIterator<Item = bool>) -> Self {
        let mut c = Confusion::default();
        for (&l, call) in labels.iter().zip(calls) {
            match (l == 1, call) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> ConfusionMetrics {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        ConfusionMetrics {
            accuracy: ratio(self.tp + self.tn, self.n()),
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            specificity: ratio(self.tn, self.tn + self.fp),
            ppv: ratio(self.tp, self.tp + self.fp),
            npv: ratio(self.tn, self.tn + self.fn_),
            mcc: (mcc_den > 0.0).then(|| (tp * tn - fp * fn_) / mcc_den),
        }
    }
}

/// Threshold metrics; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub mcc: Option<f64>,
}

pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMetrics> {
    check(scores, labels)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MomeError::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(Confusion::at(scores, labels, threshold).metrics())
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return Err(MomeError::Undefined("AUROC needs both classes".into()));
    }
    let mut negatives_below = neg as f64;
    let mut wins = 0.0;
    for g in tie_groups(scores) {
        let (p, n) = counts(&g.iter().map(|&i| labels[i]).collect::<Vec<_>>());
        negatives_below -= n as f64;
        wins += p as f64 * (negatives_below + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision `Σ (R_k − R_{k−1}) P_k` over descending thresholds,
/// one operating point per distinct score.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, _) = counts(labels);
    if pos == 0 {
        return Err(MomeError::Undefined("AUPRC needs a positive case".into()));
    }
    let (mut tp, mut seen, mut prev_recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i] == 1).count();
        seen += g.len();
        let recall = tp as f64 / pos as f64;
        area += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    Ok(area)
}

/// ROC vertices `(threshold, fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per
/// distinct score; the first vertex has an infinite threshold.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    check(scores, labels)?;
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return Err(MomeError::Undefined("ROC needs both classes".into()));
    }
    let mut pts = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0, 0);
    for g in tie_groups(scores) {
        for &i in &g {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        pts.push((scores[g[0]], fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Precision-recall vertices `(threshold, recall, precision)`.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    check(scores, labels)?;
    let (pos, _) = counts(labels);
    if pos == 0 {
        return Err(MomeError::Undefined("PR curve needs a positive case".into()));
    }
    let (mut tp, mut seen) = (0, 0);
    Ok(tie_groups(scores)
        .into_iter()
        .map(|g| {
            tp += g.iter().filter(|&&i| labels[i] == 1).count();
            seen += g.len();
            (scores[g[0]], tp as f64 / pos as f64, tp as f64 / seen as f64)
        })
        .collect())
}

/// Region of the ROC plane for a partial area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialRegion {
    /// Specificity at least this value (FPR in `[0, 1 − s]`).
    MinSpecificity(f64),
    /// Sensitivity at least this value (TPR in `[s, 1]`), integrated along
    /// the TPR axis.
    MinSensitivity(f64),
}

/// Integral of `y` over `x ∈ [lo, hi]` along a polyline nondecreasing in `x`.
fn clipped_area(points: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x1 <= x0 {
            continue;
        }
        let (a, b) = (x0.max(lo), x1.min(hi));
        if b <= a {
            continue;
        }
        let y = |x: f64| y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        area += 0.5 * (y(a) + y(b)) * (b - a);
    }
    area
}

/// McClish-standardized partial AUROC in `[0.5, 1]` (below 0.5 when worse
/// than chance). `None` when the region has zero width.
pub fn partial_auroc(scores: &[f64], labels: &[u8], region: PartialRegion) -> Result<Option<f64>> {
    let roc = roc_curve(scores, labels)?;
    let (pts, lo, hi): (Vec<(f64, f64)>, f64, f64) = match region {
        PartialRegion::MinSpecificity(s) => (roc.iter().map(|&(_, f, t)| (f, t)).collect(), 0.0, 1.0 - s),
        PartialRegion::MinSensitivity(s) => (roc.iter().map(|&(_, f, t)| (t, 1.0 - f)).collect(), s, 1.0),
    };
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(MomeError::invalid(format!(
            "partial AUROC bound outside [0, 1]: {region:?}"
        )));
    }
    if hi - lo <= 0.0 {
        return Ok(None);
    }
    let pa = clipped_area(&pts, lo, hi);
    let (a_min, a_max) = match region {
        PartialRegion::MinSpecificity(_) => (0.5 * (hi * hi - lo * lo), hi - lo),
        PartialRegion::MinSensitivity(_) => (0.5 * ((1.0 - lo).powi(2) - (1.0 - hi).powi(2)), hi - lo),
    };
    Ok(Some(0.5 * (1.0 + (pa - a_min) / (a_max - a_min))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_hand_oracle() {
        let c = Confusion {
            tp: 3,
            fp: 1,
            tn: 3,
            fn_: 1,
        };
        let m = c.metrics();
        assert!((m.mcc.unwrap() - 0.5).abs() < 1e-15);
        assert!((m.f1.unwrap() - 0.75).abs() < 1e-15);
        let empty = Confusion {
            tp: 0,
            fp: 0,
            tn: 4,
            fn_: 0,
        }
        .metrics();
        assert_eq!(empty.sensitivity, None);
        assert_eq!(empty.mcc, None);
        assert_eq!(empty.specificity, Some(1.0));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.2, 0.3, 0.6, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(MomeError::Undefined(_))));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.2, 0.3, 0.6, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!((auprc(&[0.5; 5], &[0, 1, 0, 1, 1]).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn partial_auroc_extremes() {
        let (s, l) = ([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]);
        for r in [PartialRegion::MinSpecificity(0.9), PartialRegion::MinSensitivity(0.9)] {
            assert!((partial_auroc(&s, &l, r).unwrap().unwrap() - 1.0).abs() < 1e-12);
            assert!((partial_auroc(&[0.5; 4], &l, r).unwrap().unwrap() - 0.5).abs() < 1e-12);
        }
        assert_eq!(partial_auroc(&s, &l, PartialRegion::MinSpecificity(1.0)).unwrap(), None);
    }
}
