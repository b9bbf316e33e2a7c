use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mome::arch::{load_checkpoint, save_checkpoint, ModalitySet, ModelState};
use mome::attribution::{integrated_gradients, shapley_json, shapley_modalities, Baseline, EmptyValue};
use mome::data::{generate as generate_studies, load_dataset, save_dataset, split as split_of, StudyRecord};
use mome::eval::{
    compare_cohorts, decision_csv, decision_curve_with_ci, evaluate as evaluate_cohort, pr_csv, reader_compare,
    roc_csv, subgroup_report, Cohort, EvalReport, PairedDifference, Scenario, ScoredCase,
};
use mome::train::{predict_scores, trace_csv, train as train_model, tta_predict};
use mome::MomeError;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{BaselineKind, EmptyKind, Method};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json(v: &impl serde::Serialize) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Data(e.to_string()))
}

fn load_records(path: &Path) -> Result<Vec<StudyRecord>, CliError> {
    Ok(load_dataset(path)?)
}

fn nonempty_split<'a>(records: &'a [StudyRecord], split: &str) -> Result<Vec<&'a StudyRecord>, CliError> {
    let chosen = split_of(records, split);
    if chosen.is_empty() {
        return Err(CliError::Data(format!("no studies in split {split:?}")));
    }
    Ok(chosen)
}

fn modality_set(state: &ModelState, names: &[String]) -> Result<ModalitySet, CliError> {
    if names.is_empty() {
        return Ok(ModalitySet::all(state.config.modalities.len()));
    }
    Ok(ModalitySet::from_names(&state.config, names)?)
}

pub fn generate(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    run.lock_into(out)?;
    let records = generate_studies(&run.data)?;
    save_dataset(&records, &out.join("dataset.mds"))?;

    let mut counts: BTreeMap<(String, String), [usize; 2]> = BTreeMap::new();
    for r in &records {
        counts.entry(("label".into(), r.label.to_string())).or_default()[r.label as usize] += 1;
        for (k, v) in &r.tags {
            counts.entry((k.clone(), v.clone())).or_default()[r.label as usize] += 1;
        }
    }
    println!(
        "{} studies written to {}",
        records.len(),
        out.join("dataset.mds").display()
    );
    println!("key,value,benign,malignant");
    for ((k, v), [b, m]) in counts {
        println!("{k},{v},{b},{m}");
    }
    Ok(())
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    run.lock_into(out)?;
    let records = load_records(data)?;
    let train_set = nonempty_split(&records, "train")?;
    let val_set = nonempty_split(&records, "val")?;
    let outcome = train_model(&train_set, &val_set, &run.train, &run.model)?;
    save_checkpoint(&outcome.best, &out.join("checkpoint.bin"))?;
    write(&out.join("trace.csv"), trace_csv(&outcome.trace))?;
    let best = &outcome.trace[outcome.best_epoch];
    println!(
        "best epoch {} of {}: val AUROC {:.4}",
        outcome.best_epoch,
        outcome.trace.len(),
        best.val_auroc
    );
    Ok(())
}

pub fn evaluate(
    config: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    modalities: &[String],
    tta: bool,
    split: &str,
) -> Result<(), CliError> {
    let mut run = RunConfig::load(config)?;
    let state = load_checkpoint(checkpoint)?;
    run.model = state.config.clone();
    let present = modality_set(&state, modalities)?;
    let records = load_records(data)?;
    let chosen = nonempty_split(&records, split)?;
    run.lock_into(out)?;

    let scores = if tta {
        chosen
            .par_iter()
            .map(|r| tta_predict(&state, r, present))
            .collect::<mome::Result<Vec<f64>>>()?
    } else {
        predict_scores(&state, &chosen, present)?
    };
    if let Some((r, s)) = chosen.iter().zip(&scores).find(|(_, s)| !s.is_finite()) {
        return Err(MomeError::Numeric(format!("study {}: score {s}", r.id)).into());
    }
    let cohort = Cohort::new(
        chosen
            .iter()
            .zip(&scores)
            .map(|(r, &score)| ScoredCase {
                id: r.id.clone(),
                score,
                label: r.label,
                tags: r.tags.clone(),
            })
            .collect(),
    )?;
    let ev = &run.eval;
    let mut report = evaluate_cohort(&cohort, ev.threshold, ev.n_boot, ev.seed)?;
    report.meta.modalities = Some(present.names(&state.config));
    report.meta.tta = Some(tta);
    write(&out.join("report.json"), report.to_json()?)?;
    write(&out.join("roc.csv"), roc_csv(&cohort)?)?;
    write(&out.join("prc.csv"), pr_csv(&cohort)?)?;

    let (s, l) = (cohort.scores(), cohort.labels());
    let thresholds = ev.decision_thresholds();
    for (scenario, name) in [
        (Scenario::Treat, "decision_treat.csv"),
        (Scenario::AvoidIntervention, "decision_avoid.csv"),
    ] {
        let curve = decision_curve_with_ci(&s, &l, scenario, &thresholds, ev.n_boot, ev.seed)?;
        write(&out.join(name), decision_csv(&curve))?;
    }

    let mut groups = BTreeMap::new();
    for key in &ev.subgroups {
        groups.insert(
            key.clone(),
            subgroup_report(&cohort, key, ev.threshold, ev.n_boot, ev.seed)?,
        );
    }
    write(&out.join("subgroups.json"), to_json(&groups)?)?;

    let show = |m: &str| report.point(m).map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} studies, modalities {}, tta {tta}: AUROC {}, AUPRC {}, MCC {}",
        cohort.len(),
        present.names(&state.config).join("+"),
        show("auroc"),
        show("auprc"),
        show("mcc")
    );
    Ok(())
}

pub struct AttributeArgs {
    pub study: Option<String>,
    pub split: Option<String>,
    pub method: Method,
    pub baseline: BaselineKind,
    pub baseline_seed: u64,
    pub steps: usize,
    pub modalities: Vec<String>,
    pub tta: bool,
    pub empty: EmptyKind,
}

pub fn attribute(
    config: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    args: &AttributeArgs,
) -> Result<(), CliError> {
    let mut run = RunConfig::load(config)?;
    let state = load_checkpoint(checkpoint)?;
    run.model = state.config.clone();
    let records = load_records(data)?;
    let chosen: Vec<&StudyRecord> = match (&args.study, &args.split) {
        (Some(id), _) => vec![records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| CliError::Data(format!("unknown study {id:?}")))?],
        (None, Some(split)) => nonempty_split(&records, split)?,
        (None, None) => return Err(CliError::Config("either --study or --split is required".into())),
    };
    run.lock_into(out)?;

    match args.method {
        Method::Ig => {
            let present = modality_set(&state, &args.modalities)?;
            let baseline = match args.baseline {
                BaselineKind::Noise => Baseline::Noise {
                    seed: args.baseline_seed,
                },
                BaselineKind::Zeros => Baseline::Zeros,
            };
            let mut maps = Vec::with_capacity(chosen.len());
            let mut summary = Vec::with_capacity(chosen.len());
            for r in &chosen {
                let m = integrated_gradients(r, present, &state, &baseline, args.steps)?;
                println!(
                    "{}: F(x) {:.6} F(baseline) {:.6} completeness residual {:.3e}",
                    m.study, m.f_input, m.f_baseline, m.residual
                );
                summary.push(json!({
                    "study": m.study,
                    "baseline": m.baseline,
                    "steps": m.steps,
                    "f_input": m.f_input,
                    "f_baseline": m.f_baseline,
                    "residual": m.residual,
                }));
                maps.push(m.to_record());
            }
            save_dataset(&maps, &out.join("ig.mds"))?;
            write(&out.join("ig.json"), to_json(&summary)?)?;
        }
        Method::Shapley => {
            let rule = match args.empty {
                EmptyKind::Half => EmptyValue::FixedHalf,
                EmptyKind::Prevalence => {
                    let train = nonempty_split(&records, "train")?;
                    let pos = train.iter().filter(|r| r.is_positive()).count();
                    EmptyValue::Prevalence(pos as f64 / train.len() as f64)
                }
            };
            let results = chosen
                .iter()
                .map(|r| shapley_modalities(r, &state, rule, args.tta))
                .collect::<mome::Result<Vec<_>>>()?;
            write(
                &out.join("shapley.json"),
                shapley_json(&results, state.config.classifier_classes)?,
            )?;
            for r in &results {
                let phi: Vec<String> = r
                    .modalities
                    .iter()
                    .zip(&r.phi)
                    .map(|(m, p)| format!("{m} {p:.4}"))
                    .collect();
                println!(
                    "{}: phi {} efficiency residual {:.3e}",
                    r.study,
                    phi.join(", "),
                    r.efficiency_residual
                );
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct ReaderCall {
    id: String,
    call: u8,
}

fn read_reader_calls(path: &Path, report: &EvalReport) -> Result<Vec<bool>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut calls = BTreeMap::new();
    for row in reader.deserialize() {
        let row: ReaderCall = row.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if row.call > 1 {
            return Err(CliError::Data(format!(
                "case {}: call {} is not 0 or 1",
                row.id, row.call
            )));
        }
        if calls.insert(row.id.clone(), row.call == 1).is_some() {
            return Err(CliError::Data(format!("duplicate reader call for case {}", row.id)));
        }
    }
    if calls.len() != report.cases.len() {
        if let Some(extra) = calls.keys().find(|id| !report.cases.iter().any(|c| &c.id == *id)) {
            return Err(CliError::Data(format!("reader call for unknown case {extra}")));
        }
    }
    report
        .cases
        .iter()
        .map(|c| {
            calls
                .get(&c.id)
                .copied()
                .ok_or_else(|| CliError::Data(format!("no reader call for case {}", c.id)))
        })
        .collect()
}

fn load_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(EvalReport::from_json(&text)?)
}

fn diff_json(d: &PairedDifference) -> serde_json::Value {
    json!({
        "point": d.point,
        "lo": d.lo,
        "hi": d.hi,
        "p_value": d.p_value,
        "skipped": d.skipped,
        "significant": d.significant(),
    })
}

/// Returns whether any difference is significant.
pub fn compare(
    config: Option<&Path>,
    report_a: &Path,
    report_b: Option<&Path>,
    reader_calls: Option<&Path>,
    out: &Path,
) -> Result<bool, CliError> {
    let run = RunConfig::load(config)?;
    let ev = &run.eval;
    let a = load_report(report_a)?;
    let (doc, significant) = match (report_b, reader_calls) {
        (Some(b_path), _) => {
            let b = load_report(b_path)?;
            let (ca, cb) = (a.cohort()?, b.cohort()?);
            let mut rows = BTreeMap::new();
            let mut significant = false;
            for m in ev.metrics()? {
                let row = match compare_cohorts(&ca, &cb, &[m], ev.threshold, ev.n_boot, ev.seed) {
                    Ok(d) => {
                        let d = &d[m.name()];
                        significant |= d.significant();
                        diff_json(d)
                    }
                    Err(MomeError::Undefined(why)) => {
                        log::warn!("{}: {why}", m.name());
                        serde_json::Value::Null
                    }
                    Err(e) => return Err(e.into()),
                };
                rows.insert(m.name(), row);
            }
            let doc = json!({
                "schema": "mome-compare/1",
                "kind": "reports",
                "n": a.cases.len(),
                "threshold": ev.threshold,
                "n_boot": ev.n_boot,
                "seed": ev.seed,
                "differences": rows,
                "significant": significant,
            });
            (doc, significant)
        }
        (None, Some(calls_path)) => {
            let calls = read_reader_calls(calls_path, &a)?;
            let cmp = reader_compare(&a.cohort()?, &calls, ev.threshold, ev.n_boot, ev.seed)?;
            let significant = cmp.f1.significant() || cmp.mcc.significant();
            let doc = json!({
                "schema": "mome-compare/1",
                "kind": "reader",
                "n": a.cases.len(),
                "threshold": ev.threshold,
                "n_boot": ev.n_boot,
                "seed": ev.seed,
                "model": cmp.model,
                "reader": cmp.reader,
                "differences": { "f1": diff_json(&cmp.f1), "mcc": diff_json(&cmp.mcc) },
                "significant": significant,
            });
            (doc, significant)
        }
        (None, None) => {
            return Err(CliError::Config(
                "either --report-b or --reader-calls is required".into(),
            ))
        }
    };
    run.lock_into(out)?;
    write(&out.join("compare.json"), to_json(&doc)?)?;
    for (k, d) in doc["differences"].as_object().expect("object") {
        if d.is_null() {
            println!("{k}: undefined");
            continue;
        }
        println!(
            "{k}: {:+.4} [{:+.4}, {:+.4}] p {:.4}{}",
            d["point"].as_f64().unwrap_or(f64::NAN),
            d["lo"].as_f64().unwrap_or(f64::NAN),
            d["hi"].as_f64().unwrap_or(f64::NAN),
            d["p_value"].as_f64().unwrap_or(f64::NAN),
            if d["significant"] == true { " *" } else { "" }
        );
    }
    Ok(significant)
}
