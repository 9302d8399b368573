use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use mi_cascade::pipeline::{read_dataset, MANIFEST_FILE};
use mi_cascade::volume::{read_labels, write_miv};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mi-cascade"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn error_line(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: "), "{err}");
    lines[0].to_string()
}

fn small_config(dir: &Path) {
    fs::write(
        dir.join("cfg.json"),
        r#"{"n_cases": 6, "pipeline": {"folds": 3,
            "stage1": {"batch_size": 2, "iterations_per_epoch": 2},
            "stage2": {"batch_size": 2, "iterations_per_epoch": 2}}}"#,
    )
    .unwrap();
}

#[test]
fn phantom_gen_is_byte_identical_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(&bin(d, &["--config", "cfg.json", "phantom-gen", "--out", "a"]));
    ok(&bin(d, &["--config", "cfg.json", "phantom-gen", "--out", "b"]));
    let mut names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6 * 2 + 1);
    for n in &names {
        assert_eq!(fs::read(d.join("a").join(n)).unwrap(), fs::read(d.join("b").join(n)).unwrap());
    }
    let (m, cases) = read_dataset(d.join("a")).unwrap();
    assert_eq!(cases.iter().filter(|c| c.pathological == Some(true)).count(), 4);
    assert!(m.cases.iter().all(|c| c.fold.is_some() && c.seed.is_some()));

    ok(&bin(d, &["--config", "cfg.json", "--seed", "9", "phantom-gen", "--out", "c"]));
    assert_ne!(fs::read(d.join("a/case_000_image.miv")).unwrap(), fs::read(d.join("c/case_000_image.miv")).unwrap());

    let e = error_line(&bin(d, &["phantom-gen", "--out", "x", "--fraction", "1.5"]));
    assert!(e.contains("pathological_fraction"), "{e}");
}

#[test]
fn preprocess_records_order_and_flags_corrupt_input() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(&bin(d, &["--config", "cfg.json", "phantom-gen", "--out", "raw"]));
    ok(&bin(d, &["--config", "cfg.json", "--jobs", "2", "preprocess", "--input", "raw", "--out", "pre"]));
    let manifest = fs::read_to_string(d.join("pre").join(MANIFEST_FILE)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["preprocessing"]["order"], serde_json::json!(["resample", "zscore"]));
    assert_eq!(v["preprocessing"]["target_spacing"], serde_json::json!([10.0, 1.458, 1.458]));
    // identity spacing: labels unchanged, images only z-scored
    let (_, raw) = read_dataset(d.join("raw")).unwrap();
    let (_, pre) = read_dataset(d.join("pre")).unwrap();
    assert_eq!(raw[0].labels, pre[0].labels);
    let mean: f64 = pre[0].image.data().iter().map(|&x| x as f64).sum::<f64>() / pre[0].image.len() as f64;
    assert!(mean.abs() < 1e-5);

    fs::write(d.join("raw/case_002_image.miv"), b"MIV1\n{\"shape\":").unwrap();
    let e = error_line(&bin(d, &["preprocess", "--input", "raw", "--out", "pre2"]));
    assert!(e.contains("case_002_image.miv"), "{e}");
}

#[test]
fn train_predict_evaluate_classify() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(&bin(d, &["--config", "cfg.json", "phantom-gen", "--out", "data"]));

    let t = Instant::now();
    ok(&bin(d, &["--config", "cfg.json", "train", "--dataset", "data", "--stage", "1", "--fold", "0", "--out", "ck", "--epochs", "1"]));
    assert!(t.elapsed().as_secs() < 60);
    ok(&bin(d, &["--config", "cfg.json", "train", "--dataset", "data", "--stage", "2", "--fold", "0", "--out", "ck", "--epochs", "1"]));
    let trace = fs::read_to_string(d.join("ck/stage1_fold0_loss.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ck/stage1_fold0_run.json")).unwrap()).unwrap();
    assert_eq!(run["preprocessing_order"], serde_json::json!(["resample", "zscore"]));
    assert_eq!(run["folds"].as_object().unwrap().len(), 6);

    ok(&bin(d, &["--config", "cfg.json", "predict", "--dataset", "data", "--checkpoints", "ck", "--out", "pred"]));
    let csv = fs::read_to_string(d.join("pred/classification.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "case_id,prediction");
    assert_eq!(lines.len(), 7);
    let mut sorted = lines[1..].to_vec();
    sorted.sort();
    assert_eq!(sorted, lines[1..]);
    assert!(lines[1..].iter().all(|l| l.ends_with(",normal") || l.ends_with(",pathological")));

    ok(&bin(d, &["--config", "cfg.json", "evaluate", "--pred", "pred", "--gt", "data", "--out", "ev"]));
    assert!(fs::read_to_string(d.join("ev/evaluation.csv")).unwrap().starts_with("case_id,target,dice"));

    let out = bin(d, &["--config", "cfg.json", "classify", "--pred", "pred"]);
    ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout), csv);

    fs::create_dir(d.join("only1")).unwrap();
    fs::copy(d.join("ck/stage1_fold0.ckpt"), d.join("only1/stage1_fold0.ckpt")).unwrap();
    let e = error_line(&bin(d, &["predict", "--dataset", "data", "--checkpoints", "only1", "--out", "p2"]));
    assert!(e.contains("stage 2"), "{e}");
}

#[test]
fn evaluate_perfect_predictions_and_missing_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(&bin(d, &["--config", "cfg.json", "phantom-gen", "--out", "data"]));
    fs::create_dir(d.join("pred")).unwrap();
    for i in 0..6 {
        let l = read_labels(d.join(format!("data/case_00{i}_label.miv"))).unwrap();
        write_miv(&l, d.join(format!("pred/case_00{i}_pred.miv"))).unwrap();
    }
    ok(&bin(d, &["evaluate", "--pred", "pred", "--gt", "data", "--out", "ev"]));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/summary.json")).unwrap()).unwrap();
    for t in ["myocardium", "infarction", "no_reflow", "whole_lv", "lesions"] {
        assert_eq!(s["targets"][t]["dice"]["mean"], 1.0, "{t}");
        assert_eq!(s["targets"][t]["dice_pct"], "100.00 ± 0.00", "{t}");
    }
    assert_eq!(s["classification"]["accuracy"], 1.0);

    let l = read_labels(d.join("data/case_000_label.miv")).unwrap();
    write_miv(&l, d.join("pred/case_999_pred.miv")).unwrap();
    let e = error_line(&bin(d, &["evaluate", "--pred", "pred", "--gt", "data", "--out", "ev2"]));
    assert!(e.contains("case_999"), "{e}");
}

#[test]
fn train_rejects_missing_folds() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(&bin(d, &["--config", "cfg.json", "phantom-gen", "--out", "data"]));
    let path = d.join("data").join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["cases"][1]["fold"] = serde_json::Value::Null;
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    let e = error_line(&bin(d, &["--config", "cfg.json", "train", "--dataset", "data", "--stage", "1", "--fold", "0", "--out", "ck"]));
    assert!(e.contains("fold"), "{e}");
}
