//! Training loop, optimizer, augmentation and test-time augmentation.

mod augment;
mod optim;
mod tta;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_train, sample_placement, Augmentation};
pub use optim::{adam_step, class_weights, cosine_lr, weighted_cross_entropy, ClassWeighting, OptimizerState};
pub use tta::{tta_predict, tta_variants, Anchor, TtaVariant};

use crate::arch::{ModalitySet, ModelState, MomeConfig};
use crate::data::{prepare, Placement, StudyRecord};
use crate::error::{MomeError, Result};
use crate::eval::auroc;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Probability that a step sees a random proper nonempty subset of the
    /// modalities instead of all of them.
    pub modality_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr_max: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            class_weighting: ClassWeighting::Prevalence,
            seed: 0,
            augmentation: Augmentation::default(),
            modality_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for the desk synthetic task.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 10,
            lr_max: 1e-3,
            lr_min: 1e-5,
            modality_dropout: 0.75,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MomeError::config(m));
        if self.epochs < 1 {
            return err("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return err("batch_size must be >= 1".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return err(format!(
                "need 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return err("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return err(format!("modality_dropout {} outside [0, 1]", self.modality_dropout));
        }
        Ok(())
    }
}

/// Modalities seen by one training step.
fn step_modalities<R: rand::Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> ModalitySet {
    let all = ModalitySet::all(n);
    if p == 0.0 || n < 2 || !rng.random_bool(p) {
        return all;
    }
    ModalitySet::from_bits(rng.random_range(1..all.bits()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_auroc: f64,
}

pub fn trace_csv(trace: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,lr,mean_loss,val_auroc\n");
    for t in trace {
        writeln!(out, "{},{},{},{}", t.epoch, t.lr, t.mean_loss, t.val_auroc).expect("string write");
    }
    out
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUROC.
    pub best: ModelState,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: ModelState,
    pub trace: Vec<EpochTrace>,
}

/// Positive-class score of one study from a centered, unflipped pass.
pub fn predict_score(state: &ModelState, record: &StudyRecord, present: ModalitySet) -> Result<f64> {
    let inputs = prepare(
        record,
        &state.config,
        present,
        &Placement::centered(state.config.modalities.len()),
    )?;
    Ok(state.predict(&inputs, present)?[1])
}

/// Scores for many studies, in order.
pub fn predict_scores(state: &ModelState, records: &[&StudyRecord], present: ModalitySet) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    records.par_iter().map(|r| predict_score(state, r, present)).collect()
}

fn labels_of(records: &[&StudyRecord]) -> Vec<u8> {
    records.iter().map(|r| r.label).collect()
}

/// Run `cfg.epochs` epochs from a fresh initialization of `model`, keeping
/// the parameters of the epoch with the highest validation AUROC (earliest
/// on ties). All configured modalities are used.
pub fn train(
    train_set: &[&StudyRecord],
    val_set: &[&StudyRecord],
    cfg: &TrainConfig,
    model: &MomeConfig,
) -> Result<TrainOutcome> {
    let state = ModelState::init(model)?;
    train_from(state, train_set, val_set, cfg, |_| {})
}

/// Training from a given state, calling `on_epoch` after each epoch.
pub fn train_from(
    mut state: ModelState,
    train_set: &[&StudyRecord],
    val_set: &[&StudyRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochTrace),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(MomeError::data("training and validation sets must be nonempty"));
    }
    let val_labels = labels_of(val_set);
    if !(val_labels.contains(&0) && val_labels.contains(&1)) {
        return Err(MomeError::data("validation set needs both classes"));
    }
    let n_mod = state.config.modalities.len();
    let present = ModalitySet::all(n_mod);
    let weights = class_weights(
        &labels_of(train_set),
        state.config.classifier_classes,
        cfg.class_weighting,
    )?;
    let mut opt = OptimizerState::new(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: std::collections::BTreeMap<String, Tensor> = Default::default();
            for &i in batch {
                let rec = train_set[i];
                let inputs = augment_train(rec, &state.config, &cfg.augmentation, &mut rng)?;
                let label = rec.label as usize;
                let seen = step_modalities(n_mod, cfg.modality_dropout, &mut rng);
                let lg = state.loss_and_grads(&inputs, seen, label, weights[label])?;
                if !lg.loss.is_finite() {
                    return Err(MomeError::Numeric(format!(
                        "non-finite loss at epoch {epoch}, study {}",
                        rec.id
                    )));
                }
                losses.push(lg.loss);
                for (name, g) in lg.grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            if batch.len() > 1 {
                let k = 1.0 / batch.len() as f64;
                for g in acc.values_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
            adam_step(&mut state, &mut opt, &acc, lr, cfg)?;
        }
        let mean_loss = crate::tensor::compensated_sum(losses.iter().copied()) / losses.len() as f64;
        let val_scores = predict_scores(&state, val_set, present)?;
        let val_auroc = auroc(&val_scores, &val_labels)?;
        let t = EpochTrace {
            epoch,
            lr,
            mean_loss,
            val_auroc,
        };
        log::info!("epoch {epoch}: lr {lr:.3e} loss {mean_loss:.4} val AUROC {val_auroc:.4}");
        on_epoch(&t);
        trace.push(t);
        if best.as_ref().is_none_or(|(b, _, _)| val_auroc > *b) {
            best = Some((val_auroc, epoch, state.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: state,
        trace,
    })
}
