use serde::{Deserialize, Serialize};

use super::bootstrap::bootstrap_ci;
use super::metrics::Confusion;
use crate::error::{MomeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Net benefit of treating predicted positives.
    Treat,
    /// Net interventions avoided by skipping predicted negatives.
    AvoidIntervention,
}

/// One row of a decision curve. `all` and `none` are the reference
/// strategies of the scenario: for `Treat` these are treat-all and
/// treat-none; for `AvoidIntervention` they are avoid-all (intervene on
/// nobody) and avoid-none (intervene on everybody, zero avoided).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub threshold: f64,
    pub model: f64,
    pub all: f64,
    pub none: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

/// Net benefit at threshold `t`, a case predicted positive iff `score ≥ t`.
pub fn net_benefit(scores: &[f64], labels: &[u8], scenario: Scenario, t: f64) -> f64 {
    let c = Confusion::at_inclusive(scores, labels, t);
    let n = c.n() as f64;
    match scenario {
        Scenario::Treat => c.tp as f64 / n - c.fp as f64 / n * t / (1.0 - t),
        Scenario::AvoidIntervention => c.tn as f64 / n - c.fn_ as f64 / n * (1.0 - t) / t,
    }
}

fn reference(prevalence: f64, scenario: Scenario, t: f64) -> (f64, f64) {
    match scenario {
        Scenario::Treat => (prevalence - (1.0 - prevalence) * t / (1.0 - t), 0.0),
        Scenario::AvoidIntervention => ((1.0 - prevalence) - prevalence * (1.0 - t) / t, 0.0),
    }
}

fn check_grid(thresholds: &[f64]) -> Result<()> {
    if let Some(t) = thresholds.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(MomeError::invalid(format!("decision threshold {t} outside (0, 1)")));
    }
    Ok(())
}

pub fn decision_curve(
    scores: &[f64],
    labels: &[u8],
    scenario: Scenario,
    thresholds: &[f64],
) -> Result<Vec<DecisionPoint>> {
    check_grid(thresholds)?;
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(MomeError::invalid(
            "decision curve needs matching nonempty scores and labels",
        ));
    }
    let prevalence = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (all, none) = reference(prevalence, scenario, t);
            DecisionPoint {
                threshold: t,
                model: net_benefit(scores, labels, scenario, t),
                all,
                none,
                lo: None,
                hi: None,
            }
        })
        .collect())
}

/// Decision curve with a bootstrap interval on each model point.
pub fn decision_curve_with_ci(
    scores: &[f64],
    labels: &[u8],
    scenario: Scenario,
    thresholds: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<Vec<DecisionPoint>> {
    let mut curve = decision_curve(scores, labels, scenario, thresholds)?;
    for p in &mut curve {
        let t = p.threshold;
        let ci = bootstrap_ci(
            scores.len(),
            |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                Some(net_benefit(&s, &l, scenario, t))
            },
            n_boot,
            seed,
        )?;
        p.lo = Some(ci.lo);
        p.hi = Some(ci.hi);
    }
    Ok(curve)
}
