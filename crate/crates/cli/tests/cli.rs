use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mome::arch::{load_checkpoint, save_checkpoint, ModelState};
use mome::data::{load_dataset, save_dataset};
use tempfile::TempDir;

const TINY: &str = include_str!("../../../configs/tiny.toml");

fn mome(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mome"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mome")
}

fn ok(args: &[&str]) -> String {
    let out = mome(args);
    assert!(
        out.status.success(),
        "mome {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mome(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A directory holding the tiny config, a generated dataset and a trained
/// checkpoint.
struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        let run = Run { dir };
        ok(&["generate", "--config", s(&run.config()), "--out", s(&run.path("gen"))]);
        ok(&[
            "train",
            "--config",
            s(&run.config()),
            "--data",
            s(&run.data()),
            "--out",
            s(&run.path("train")),
        ]);
        run
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.toml")
    }

    fn data(&self) -> PathBuf {
        self.path("gen/dataset.mds")
    }

    fn checkpoint(&self) -> PathBuf {
        self.path("train/checkpoint.bin")
    }

    fn evaluate(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let (config, checkpoint, data) = (self.config(), self.checkpoint(), self.data());
        let mut args = vec![
            "evaluate",
            "--config",
            s(&config),
            "--checkpoint",
            s(&checkpoint),
            "--data",
            s(&data),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }

    fn attribute(&self, out: &str, extra: &[&str]) -> (PathBuf, String) {
        let out = self.path(out);
        let (config, checkpoint, data) = (self.config(), self.checkpoint(), self.data());
        let mut args = vec![
            "attribute",
            "--config",
            s(&config),
            "--checkpoint",
            s(&checkpoint),
            "--data",
            s(&data),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        let stdout = ok(&args);
        (out, stdout)
    }
}

fn assert_same_files(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n:?} differs"
        );
    }
}

#[test]
fn generate_is_reproducible_and_config_lock_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let stdout = ok(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("a"))]);
    assert!(stdout.starts_with("40 studies"));
    assert!(stdout.contains("split,test,"));
    ok(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("b"))]);
    assert_same_files(&dir.path().join("a"), &dir.path().join("b"));

    // Regenerating from the lock reproduces the lock and the data.
    let lock = dir.path().join("a/config.lock");
    ok(&["generate", "--config", s(&lock), "--out", s(&dir.path().join("c"))]);
    assert_same_files(&dir.path().join("a"), &dir.path().join("c"));
    assert_eq!(load_dataset(&dir.path().join("a/dataset.mds")).unwrap().len(), 40);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(
        code(&["generate", "--config", s(&bad), "--out", s(&dir.path().join("o"))]),
        2
    );
    fs::write(&bad, "[train]\nepochs = 0\n").unwrap();
    assert_eq!(
        code(&["generate", "--config", s(&bad), "--out", s(&dir.path().join("o"))]),
        2
    );
    assert_eq!(
        code(&[
            "generate",
            "--config",
            s(&dir.path().join("missing.toml")),
            "--out",
            "x"
        ]),
        2
    );
    assert_eq!(code(&["frobnicate"]), 2);
    let missing = dir.path().join("none.mds");
    assert_eq!(
        code(&["train", "--data", s(&missing), "--out", s(&dir.path().join("t"))]),
        3
    );
}

#[test]
fn pipeline_outputs_are_deterministic_and_consistent() {
    let run = Run::new();
    assert!(run.checkpoint().exists());
    let trace = fs::read_to_string(run.path("train/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(trace.starts_with("epoch,lr,mean_loss,val_auroc"));

    let a = run.evaluate("eval_a", &[]);
    let b = run.evaluate("eval_b", &[]);
    assert_same_files(&a, &b);
    for f in [
        "report.json",
        "roc.csv",
        "prc.csv",
        "decision_treat.csv",
        "decision_avoid.csv",
        "subgroups.json",
        "config.lock",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let report = json(&a.join("report.json"));
    assert_eq!(report["schema"], "mome-report/1");
    assert_eq!(report["meta"]["n"], 10);
    assert_eq!(report["meta"]["tta"], false);
    assert_eq!(report["meta"]["modalities"], serde_json::json!(["dce", "dwi", "t2"]));
    let groups = json(&a.join("subgroups.json"));
    assert!(groups["site"].is_object() && groups["birads"].is_object());
    assert_eq!(
        fs::read_to_string(a.join("decision_treat.csv"))
            .unwrap()
            .lines()
            .count(),
        10
    );

    let dce = run.evaluate("eval_dce", &["--modalities", "dce"]);
    assert_eq!(
        json(&dce.join("report.json"))["meta"]["modalities"],
        serde_json::json!(["dce"])
    );

    let tta = run.evaluate("eval_tta", &["--tta"]);
    assert_eq!(json(&tta.join("report.json"))["meta"]["tta"], true);

    // The effective config names the checkpoint's model.
    let lock = fs::read_to_string(a.join("config.lock")).unwrap();
    assert!(lock.contains("d_model = 8"));

    // A report compared with itself differs by exactly zero.
    let cmp = run.path("cmp_self");
    let r = s(&a).to_string() + "/report.json";
    let out = mome(&["compare", "--report-a", &r, "--report-b", &r, "--out", s(&cmp)]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json(&cmp.join("compare.json"));
    assert_eq!(doc["significant"], false);
    let diffs = doc["differences"].as_object().unwrap();
    assert_eq!(diffs.len(), 6);
    assert!(!diffs["auroc"].is_null());
    for d in diffs.values().filter(|d| !d.is_null()) {
        assert_eq!(
            (d["point"].as_f64(), d["lo"].as_f64(), d["hi"].as_f64()),
            (Some(0.0), Some(0.0), Some(0.0))
        );
    }

    // Reports on different splits cannot be paired.
    let val = run.evaluate("eval_val", &["--split", "val"]);
    let v = s(&val).to_string() + "/report.json";
    let out = mome(&[
        "compare",
        "--report-a",
        &r,
        "--report-b",
        &v,
        "--out",
        s(&run.path("cmp_bad")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("case mismatch at position 0: study-"));

    // Unknown modality and split.
    let args = |m: &'static str| {
        vec![
            "evaluate".to_string(),
            "--checkpoint".into(),
            s(&run.checkpoint()).into(),
            "--data".into(),
            s(&run.data()).into(),
            "--out".into(),
            s(&run.path("eval_err")).into(),
            m.into(),
        ]
    };
    let mut bad_mod = args("--modalities");
    bad_mod.push("flair".into());
    assert_eq!(code(&bad_mod.iter().map(String::as_str).collect::<Vec<_>>()), 2);
    let mut bad_split = args("--split");
    bad_split.push("holdout".into());
    assert_eq!(code(&bad_split.iter().map(String::as_str).collect::<Vec<_>>()), 3);
}

#[test]
fn attribution_commands() {
    let run = Run::new();
    let (out, stdout) = run.attribute("shap", &["--method", "shapley", "--study", "study-00035"]);
    assert!(stdout.contains("study-00035: phi dce"));
    let doc = json(&out.join("shapley.json"));
    let st = &doc["studies"][0];
    assert_eq!(st["subset_scores"].as_object().unwrap().len(), 8);
    assert!(st["efficiency_residual"].as_f64().unwrap() < 1e-9);
    assert!(out.join("config.lock").exists());

    let (batch, _) = run.attribute(
        "shap_batch",
        &["--method", "shapley", "--split", "test", "--empty", "prevalence"],
    );
    let doc = json(&batch.join("shapley.json"));
    assert_eq!(doc["studies"].as_array().unwrap().len(), 10);
    assert_eq!(doc["studies"][0]["rule"]["rule"], "prevalence");
    let total: u64 = doc["global"]
        .as_object()
        .unwrap()
        .values()
        .map(|g| g["n"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 10);

    let (ig, stdout) = run.attribute("ig", &["--method", "ig", "--study", "study-00001", "--steps", "32"]);
    assert!(stdout.contains("completeness residual"));
    let maps = load_dataset(&ig.join("ig.mds")).unwrap();
    assert_eq!(maps.len(), 1);
    assert_eq!(maps[0].tag("baseline"), Some("noise"));
    let (ig2, _) = run.attribute("ig2", &["--method", "ig", "--study", "study-00001", "--steps", "32"]);
    assert_same_files(&ig, &ig2);

    let missing = mome(&[
        "attribute",
        "--checkpoint",
        s(&run.checkpoint()),
        "--data",
        s(&run.data()),
        "--out",
        s(&run.path("none")),
        "--method",
        "shapley",
        "--study",
        "study-99999",
    ]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("unknown study"));
}

#[test]
fn ig_with_input_equal_to_baseline_gives_zero_maps() {
    let run = Run::new();
    // Constant volumes standardize to zeros, which is the zero baseline.
    let mut records = load_dataset(&run.data()).unwrap();
    for (_, t) in &mut records[0].volumes {
        t.data_mut().iter_mut().for_each(|v| *v = 3.0);
    }
    let data = run.path("flat.mds");
    save_dataset(&records, &data).unwrap();
    let id = records[0].id.clone();
    let out = run.path("ig_flat");
    ok(&[
        "attribute",
        "--checkpoint",
        s(&run.checkpoint()),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--method",
        "ig",
        "--baseline",
        "zeros",
        "--study",
        &id,
    ]);
    let maps = load_dataset(&out.join("ig.mds")).unwrap();
    assert_eq!(maps[0].volumes.len(), 3);
    assert!(maps[0].volumes.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    assert_eq!(maps[0].tag("residual"), Some("0"));
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(
        &cfg,
        TINY.replace("lr_max = 1e-3\nlr_min = 1e-5", "lr_max = 0.0\nlr_min = 0.0"),
    )
    .unwrap();
    ok(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("gen"))]);
    let data = dir.path().join("gen/dataset.mds");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("t")),
    ]);
    let state = load_checkpoint(&dir.path().join("t/checkpoint.bin")).unwrap();
    let init = ModelState::init(&state.config).unwrap();
    assert_eq!(state.params(), init.params());
}

#[test]
fn non_finite_scores_exit_4() {
    let run = Run::new();
    let mut state = load_checkpoint(&run.checkpoint()).unwrap();
    for (name, p) in state.trainable_mut() {
        if name.starts_with("head") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
    let ckpt = run.path("nan.bin");
    save_checkpoint(&state, &ckpt).unwrap();
    let out = mome(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&run.data()),
        "--out",
        s(&run.path("nan_eval")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reader_comparison_exit_code_encodes_significance() {
    let dir = TempDir::new().unwrap();
    // Perfectly separating model against a reader who misses half the positives.
    let cases: Vec<serde_json::Value> = (0..80)
        .map(|i| {
            let label = (i % 2) as u8;
            let score = if label == 1 { 0.9 } else { 0.1 };
            serde_json::json!({"id": format!("c{i:03}"), "score": score, "label": label})
        })
        .collect();
    let report = serde_json::json!({
        "schema": "mome-report/1",
        "metrics": {},
        "meta": {"n": 80, "n_positive": 40, "n_boot": 2, "seed": 0, "threshold": 0.5},
        "cases": cases,
    });
    let rp = dir.path().join("report.json");
    fs::write(&rp, report.to_string()).unwrap();
    let mut csv = String::from("id,call\n");
    for i in (0..80).rev() {
        let call = i % 2 == 1 && i % 4 == 1;
        csv += &format!("c{i:03},{}\n", u8::from(call));
    }
    let calls = dir.path().join("calls.csv");
    fs::write(&calls, &csv).unwrap();
    let out = dir.path().join("cmp");
    assert_eq!(
        code(&[
            "compare",
            "--report-a",
            s(&rp),
            "--reader-calls",
            s(&calls),
            "--out",
            s(&out)
        ]),
        1
    );
    let doc = json(&out.join("compare.json"));
    assert_eq!(doc["kind"], "reader");
    assert!(doc["differences"]["f1"]["lo"].as_f64().unwrap() > 0.0);
    assert_eq!(doc["model"]["f1"], 1.0);

    fs::write(&calls, csv.replace("c000,0\n", "")).unwrap();
    let short = mome(&[
        "compare",
        "--report-a",
        s(&rp),
        "--reader-calls",
        s(&calls),
        "--out",
        s(&out),
    ]);
    assert_eq!(short.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&short.stderr).contains("no reader call for case c000"));
}
