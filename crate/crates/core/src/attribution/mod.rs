//! Integrated gradients over input voxels and exact Shapley values over
//! modalities.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{bind_inputs, forward_on_tape, Binder, ForwardOptions, ModalitySet, ModelState};
use crate::data::{center_offset, pad_to, prepare, Placement, StudyRecord};
use crate::error::{MomeError, Result};
use crate::tensor::{compensated_sum, Tape, Tensor};
use crate::train::{predict_score, tta_predict};

/// Reference input for integrated gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    /// Seeded standard-normal voxels over each study's own extent, zero in
    /// the padding.
    Noise { seed: u64 },
    /// All-zero volumes, i.e. each channel at its mean after standardization.
    Zeros,
    /// One tensor per configured modality, shaped like the model inputs.
    Custom(Vec<Tensor>),
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::Noise { seed: 0 }
    }
}

impl Baseline {
    pub fn describe(&self) -> &'static str {
        match self {
            Baseline::Noise { .. } => "noise",
            Baseline::Zeros => "zeros",
            Baseline::Custom(_) => "custom",
        }
    }
}

/// Result of the generic integrated-gradients integrator.
#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    pub maps: Vec<Tensor>,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|Σ IG − (F(x) − F(x'))|`.
    pub residual: f64,
}

/// Integrated gradients of `f` from `baseline` to `input` with the
/// midpoint rule. `f` returns the scalar output and its gradient with
/// respect to every input tensor.
pub fn integrated_gradients_fn<F>(input: &[Tensor], baseline: &[Tensor], steps: usize, f: F) -> Result<IgResult>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)> + Sync,
{
    if steps < 2 {
        return Err(MomeError::invalid(format!(
            "integrated gradients needs steps >= 2, got {steps}"
        )));
    }
    if input.len() != baseline.len() {
        return Err(MomeError::invalid("input and baseline differ in length"));
    }
    for (x, b) in input.iter().zip(baseline) {
        if x.shape() != b.shape() {
            return Err(MomeError::shape("integrated_gradients", x.shape(), b.shape()));
        }
    }
    let point = |alpha: f64| -> Vec<Tensor> {
        input
            .iter()
            .zip(baseline)
            .map(|(x, b)| {
                let data = x
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&xv, &bv)| bv + alpha * (xv - bv))
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    };
    let mut acc: Vec<Vec<f64>> = input.iter().map(|x| vec![0.0; x.numel()]).collect();
    let chunk = rayon::current_num_threads().max(1) * 2;
    let all: Vec<usize> = (0..steps).collect();
    for block in all.chunks(chunk) {
        let grads = block
            .par_iter()
            .map(|&s| f(&point((s as f64 + 0.5) / steps as f64)).map(|(_, g)| g))
            .collect::<Result<Vec<_>>>()?;
        for g in grads {
            if g.len() != input.len() {
                return Err(MomeError::invalid("gradient count differs from input count"));
            }
            for (a, gt) in acc.iter_mut().zip(&g) {
                a.iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y);
            }
        }
    }
    let maps: Vec<Tensor> = input
        .iter()
        .zip(baseline)
        .zip(acc)
        .map(|((x, b), a)| {
            let data = x
                .data()
                .iter()
                .zip(b.data())
                .zip(a)
                .map(|((&xv, &bv), g)| (xv - bv) * g / steps as f64)
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    let f_input = f(input)?.0;
    let f_baseline = f(baseline)?.0;
    let total = compensated_sum(maps.iter().flat_map(|m| m.data().iter().copied()));
    Ok(IgResult {
        residual: (total - (f_input - f_baseline)).abs(),
        maps,
        f_input,
        f_baseline,
    })
}

/// Logit margin `logit[1] − logit[0]` and its gradient with respect to the
/// present input volumes, in the order of `present`.
pub fn logit_margin_and_grad(
    state: &ModelState,
    inputs: &[Tensor],
    present: ModalitySet,
) -> Result<(f64, Vec<Tensor>)> {
    if state.config.classifier_classes != 2 {
        return Err(MomeError::invalid("logit margin needs a two-class head"));
    }
    let mut tape = Tape::new();
    let vars = bind_inputs(&mut tape, &state.config, inputs, present, true)?;
    let mut b = Binder::new(state, false);
    let f = forward_on_tape(&mut tape, &mut b, &vars, ForwardOptions::default())?;
    let pos = tape.index(f.logits, 1)?;
    let neg = tape.index(f.logits, 0)?;
    let margin = tape.sub(pos, neg)?;
    let value = tape.value(margin).item()?;
    tape.backward(margin)?;
    let grads = present
        .iter()
        .map(|i| {
            let v = vars[i].expect("present");
            tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();
    Ok((value, grads))
}

/// Integrated-gradients maps for one study, shaped like the model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub study: String,
    /// Present modalities with their maps, in config order.
    pub maps: Vec<(String, Tensor)>,
    pub baseline: String,
    pub steps: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    pub residual: f64,
}

impl AttributionMap {
    /// The maps packaged as a study so they can be written with the
    /// dataset format. Values are rounded to f32, the format's precision.
    pub fn to_record(&self) -> StudyRecord {
        let mut tags = BTreeMap::new();
        tags.insert("kind".to_string(), "integrated_gradients".to_string());
        tags.insert("baseline".to_string(), self.baseline.clone());
        tags.insert("steps".to_string(), self.steps.to_string());
        tags.insert("f_input".to_string(), self.f_input.to_string());
        tags.insert("f_baseline".to_string(), self.f_baseline.to_string());
        tags.insert("residual".to_string(), self.residual.to_string());
        StudyRecord {
            id: self.study.clone(),
            label: 0,
            tags,
            volumes: self
                .maps
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|v| v as f32 as f64)))
                .collect(),
        }
    }
}

/// Integrated gradients of the logit margin for a study placed centered
/// and unflipped. Maps cover the present modalities only.
pub fn integrated_gradients(
    record: &StudyRecord,
    present: ModalitySet,
    state: &ModelState,
    baseline: &Baseline,
    steps: usize,
) -> Result<AttributionMap> {
    let cfg = &state.config;
    let full = prepare(record, cfg, present, &Placement::centered(cfg.modalities.len()))?;
    let idx: Vec<usize> = present.iter().collect();
    let input: Vec<Tensor> = idx.iter().map(|&i| full[i].clone()).collect();
    let base: Vec<Tensor> = match baseline {
        Baseline::Zeros => input.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        Baseline::Noise { seed } => idx
            .iter()
            .map(|&i| {
                let m = &cfg.modalities[i];
                let v = record.volume(&m.name)?;
                let s = v.shape();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(i as u64);
                let noise = Tensor::randn(s, 1.0, &mut rng);
                pad_to(&noise, m.dims, center_offset([s[0], s[1], s[2]], m.dims))
            })
            .collect::<Result<_>>()?,
        Baseline::Custom(b) => {
            if b.len() != cfg.modalities.len() {
                return Err(MomeError::invalid(format!(
                    "{} baseline tensors for {} modalities",
                    b.len(),
                    cfg.modalities.len()
                )));
            }
            idx.iter().map(|&i| b[i].clone()).collect()
        }
    };
    let eval = |xs: &[Tensor]| {
        let mut vols = full.clone();
        for (&i, x) in idx.iter().zip(xs) {
            vols[i] = x.clone();
        }
        logit_margin_and_grad(state, &vols, present)
    };
    let r = integrated_gradients_fn(&input, &base, steps, eval)?;
    Ok(AttributionMap {
        study: record.id.clone(),
        maps: idx
            .iter()
            .map(|&i| cfg.modalities[i].name.clone())
            .zip(r.maps)
            .collect(),
        baseline: baseline.describe().to_string(),
        steps,
        f_input: r.f_input,
        f_baseline: r.f_baseline,
        residual: r.residual,
    })
}

/// Value assigned to the empty coalition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum EmptyValue {
    /// `v(∅) = 0.5`.
    FixedHalf,
    /// `v(∅)` equal to the given class prevalence.
    Prevalence(f64),
}

impl EmptyValue {
    pub fn value(self) -> f64 {
        match self {
            EmptyValue::FixedHalf => 0.5,
            EmptyValue::Prevalence(p) => p,
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values for `n` players of the characteristic function
/// `v`, indexed by coalition bitmask.
pub fn shapley_values(n: usize, v: &[f64]) -> Result<Vec<f64>> {
    if n == 0 || n > 12 || v.len() != 1 << n {
        return Err(MomeError::invalid(format!(
            "characteristic function needs 2^n values for 1 <= n <= 12, got {} for n = {n}",
            v.len()
        )));
    }
    let nf = factorial(n);
    Ok((0..n)
        .map(|i| {
            let bit = 1usize << i;
            compensated_sum((0..1usize << n).filter(|s| s & bit == 0).map(|s| {
                let k = s.count_ones() as usize;
                factorial(k) * factorial(n - k - 1) / nf * (v[s | bit] - v[s])
            }))
        })
        .collect())
}

fn subset_key(set: ModalitySet, names: &[String]) -> String {
    if set.is_empty() {
        "none".to_string()
    } else {
        set.iter().map(|i| names[i].as_str()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub study: String,
    pub label: u8,
    pub modalities: Vec<String>,
    /// φ per modality in config order.
    pub phi: Vec<f64>,
    pub v_empty: f64,
    pub v_full: f64,
    /// `|Σφ − (v_full − v_empty)|`.
    pub efficiency_residual: f64,
    /// Score for every coalition, keyed by `+`-joined modality names.
    pub subset_scores: BTreeMap<String, f64>,
    pub rule: EmptyValue,
    pub tta: bool,
    /// Argmax class of the full-modality prediction.
    pub predicted_class: usize,
}

/// Shapley values of the modalities for one study, with `v(S)` the
/// positive-class score using only the modalities in `S`.
pub fn shapley_modalities(
    record: &StudyRecord,
    state: &ModelState,
    rule: EmptyValue,
    tta: bool,
) -> Result<ShapleyResult> {
    let n = state.config.modalities.len();
    let names: Vec<String> = state.config.modalities.iter().map(|m| m.name.clone()).collect();
    let scores = (1..1u16 << n)
        .into_par_iter()
        .map(|bits| {
            let s = ModalitySet::from_bits(bits);
            if tta {
                tta_predict(state, record, s)
            } else {
                predict_score(state, record, s)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut v = vec![rule.value()];
    v.extend(scores);
    let phi = shapley_values(n, &v)?;
    let v_full = v[(1 << n) - 1];
    let subset_scores = v
        .iter()
        .enumerate()
        .map(|(bits, &s)| (subset_key(ModalitySet::from_bits(bits as u16), &names), s))
        .collect();
    let efficiency_residual = (compensated_sum(phi.iter().copied()) - (v_full - v[0])).abs();
    Ok(ShapleyResult {
        study: record.id.clone(),
        label: record.label,
        modalities: names,
        phi,
        v_empty: v[0],
        v_full,
        efficiency_residual,
        subset_scores,
        rule,
        tta,
        predicted_class: usize::from(v_full > 0.5),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalShapley {
    pub n: usize,
    pub mean_phi: Vec<f64>,
}

/// Mean φ per modality within each predicted class. Classes without
/// results are left out.
pub fn global_shapley(results: &[ShapleyResult], n_classes: usize) -> Result<BTreeMap<usize, GlobalShapley>> {
    let Some(first) = results.first() else {
        return Err(MomeError::invalid("global Shapley needs at least one result"));
    };
    let k = first.phi.len();
    if results.iter().any(|r| r.phi.len() != k) {
        return Err(MomeError::invalid(
            "Shapley results disagree on the number of modalities",
        ));
    }
    let mut out = BTreeMap::new();
    for class in 0..n_classes {
        let group: Vec<&ShapleyResult> = results.iter().filter(|r| r.predicted_class == class).collect();
        if group.is_empty() {
            log::warn!("no study predicted as class {class}; omitted from global Shapley");
            continue;
        }
        let mean_phi = (0..k)
            .map(|i| compensated_sum(group.iter().map(|r| r.phi[i])) / group.len() as f64)
            .collect();
        out.insert(
            class,
            GlobalShapley {
                n: group.len(),
                mean_phi,
            },
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct ShapleyFile<'a> {
    studies: &'a [ShapleyResult],
    global: BTreeMap<usize, GlobalShapley>,
}

/// Local results and their per-class means as pretty JSON.
pub fn shapley_json(results: &[ShapleyResult], n_classes: usize) -> Result<String> {
    let file = ShapleyFile {
        studies: results,
        global: global_shapley(results, n_classes)?,
    };
    serde_json::to_string_pretty(&file).map_err(|e| MomeError::invalid(e.to_string()))
}
