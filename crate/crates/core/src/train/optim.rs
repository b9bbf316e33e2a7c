use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::arch::ModelState;
use crate::error::{MomeError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    Uniform,
    /// `w_c = N / (n_classes · N_c)`.
    Prevalence,
}

pub fn class_weights(labels: &[u8], n_classes: usize, scheme: ClassWeighting) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        *counts
            .get_mut(l as usize)
            .ok_or_else(|| MomeError::data(format!("label {l} with {n_classes} classes")))? += 1;
    }
    match scheme {
        ClassWeighting::Uniform => Ok(vec![1.0; n_classes]),
        ClassWeighting::Prevalence => counts
            .iter()
            .enumerate()
            .map(|(c, &k)| {
                if k == 0 {
                    Err(MomeError::data(format!("class {c} has no training examples")))
                } else {
                    Ok(labels.len() as f64 / (n_classes * k) as f64)
                }
            })
            .collect(),
    }
}

/// `−w_label · ln(max(score_label, 1e−12))`.
pub fn weighted_cross_entropy(scores: &[f64], label: usize, weights: &[f64]) -> Result<f64> {
    let p = *scores
        .get(label)
        .ok_or_else(|| MomeError::invalid(format!("label {label} with {} scores", scores.len())))?;
    let w = *weights
        .get(label)
        .ok_or_else(|| MomeError::invalid(format!("no weight for label {label}")))?;
    if p.is_nan() {
        return Err(MomeError::Numeric("NaN class score".into()));
    }
    Ok(-w * p.max(1e-12).ln())
}

/// Epoch-wise cosine annealing from `lr_max` at epoch 0 to `lr_min` at the
/// final epoch.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(MomeError::invalid(format!(
            "epoch {epoch} beyond {} epochs",
            cfg.epochs
        )));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr_max);
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Adam moments for the trainable parameters only.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(state: &ModelState) -> Self {
        let zeros = |p: &crate::arch::Param| vec![0.0; p.tensor.numel()];
        OptimizerState {
            step: 0,
            m: state.trainable().map(|(n, p)| (n.clone(), zeros(p))).collect(),
            v: state.trainable().map(|(n, p)| (n.clone(), zeros(p))).collect(),
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero; frozen
/// parameters are never written.
pub fn adam_step(
    state: &mut ModelState,
    opt: &mut OptimizerState,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some(name) = grads.keys().find(|n| !opt.m.contains_key(*n)) {
        return Err(MomeError::invalid(format!(
            "gradient for non-trainable parameter {name}"
        )));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in state.trainable_mut() {
        let m = opt.m.get_mut(name).expect("moment per trainable");
        let v = opt.v.get_mut(name).expect("moment per trainable");
        let g = grads.get(name).map(Tensor::data);
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        assert!((weighted_cross_entropy(&[0.5, 0.5], 0, &[1.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(weighted_cross_entropy(&[0.0, 1.0], 1, &[3.0, 2.0]).unwrap(), 0.0);
        let clamped = weighted_cross_entropy(&[1.0, 0.0], 1, &[1.0, 1.0]).unwrap();
        assert!((clamped - 12.0 * 10f64.ln()).abs() < 1e-9);
        assert!(weighted_cross_entropy(&[f64::NAN, 0.5], 0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn prevalence_weights_on_pcr_counts() {
        let mut labels = vec![1u8; 90];
        labels.extend(vec![0u8; 268]);
        let w = class_weights(&labels, 2, ClassWeighting::Prevalence).unwrap();
        assert!((w[1] - 358.0 / 180.0).abs() < 1e-15);
        assert!((w[0] - 358.0 / 536.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 5,
            lr_max: 1e-4,
            lr_min: 1e-6,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-4);
        assert!((cosine_lr(4, &cfg).unwrap() - 1e-6).abs() < 1e-20);
        assert!((cosine_lr(2, &cfg).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(5, &cfg).is_err());
    }
}
