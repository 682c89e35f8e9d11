use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crackseg_core::data::synthetic::{synthetic_dataset, SyntheticSpec};
use crackseg_core::data::{read_rgb, write_sample, Sample};
use crackseg_core::network::{read_checkpoint, Model, ModelConfig};
use crackseg_core::tensor::Tensor;

fn crackseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackseg"))
        .args(args)
        .env("CRACKSEG_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synthetic_root(dir: &Path, count: usize) -> PathBuf {
    let root = dir.join("data");
    let spec = SyntheticSpec { count, ..Default::default() };
    for s in synthetic_dataset(&spec).unwrap() {
        write_sample(&root, &s).unwrap();
    }
    root
}

#[test]
fn split_counts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let root = synthetic_root(dir.path(), 10);
    let out = crackseg(&["split", "--root", p(&root), "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "train: 6, test: 4");
    let first = fs::read_to_string(root.join("train.txt")).unwrap();
    let again = crackseg(&["split", "--root", p(&root), "--seed", "3"]);
    assert!(again.status.success());
    assert_eq!(fs::read_to_string(root.join("train.txt")).unwrap(), first);

    let fixed = crackseg(&["split", "--root", p(&root), "--train-count", "7"]);
    assert_eq!(stdout(&fixed).trim(), "train: 7, test: 3");
}

#[test]
fn split_without_masks_exits_with_input_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = synthetic_root(dir.path(), 2);
    fs::remove_dir_all(root.join("masks")).unwrap();
    let out = crackseg(&["split", "--root", p(&root)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("masks"), "{}", stderr(&out));
}

#[test]
fn gradcheck_ops_prints_one_row_per_op() {
    let out = crackseg(&["gradcheck", "ops", "--seed", "5", "--instances", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), crackseg_core::diagnostics::OP_NAMES.len());
    assert!(rows.iter().all(|r| r.ends_with("ok")));
    let again = crackseg(&["gradcheck", "ops", "--seed", "5", "--instances", "3"]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn train_requires_lr_max() {
    let dir = tempfile::tempdir().unwrap();
    let root = synthetic_root(dir.path(), 4);
    assert!(crackseg(&["split", "--root", p(&root)]).status.success());
    let out = crackseg(&["train", "--root", p(&root), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lr_max"));
}

#[test]
fn train_evaluate_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = synthetic_root(dir.path(), 6);
    assert!(crackseg(&["split", "--root", p(&root)]).status.success());
    let run = dir.path().join("run");
    let out = crackseg(&[
        "train", "--root", p(&root), "--out", p(&run), "--arch", "reduced", "--two-stage",
        "--sizes", "64,96,128", "--epochs-stage1", "1", "--epochs-stage2", "1",
        "--epochs-per-size", "1", "--lr-max", "0.01", "--no-augment",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("stage 1 size 64"), "{text}");
    assert!(text.contains("stage 2 size 64"), "{text}");
    assert!(text.contains("size 96") && text.contains("size 128"), "{text}");
    let logs = crackseg_core::trainer::read_epoch_log(&run.join("train_log.jsonl")).unwrap();
    let sizes: Vec<usize> = logs.iter().map(|l| l.size).collect();
    assert_eq!(sizes, vec![64, 64, 96, 128]);
    assert!(run.join("final.ckpt").is_file() && run.join("run.cfg").is_file());

    let ckpt = run.join("final.ckpt");
    let eval = crackseg(&["evaluate", "--checkpoint", p(&ckpt), "--root", p(&root), "--radius", "0"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let line = stdout(&eval);
    assert!(line.starts_with("Pr ") && line.contains(" Re ") && line.contains(" F1 "), "{line}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["radius"], 0);
    assert_eq!(report["per_image"].as_array().unwrap().len(), 2);

    // 70×50 is not a multiple of the encoder stride.
    let img = Sample::new(
        "odd",
        Tensor::from_fn([3, 50, 70], |i| ((i % 13) as f32) / 13.0),
        Tensor::zeros([1, 50, 70]),
    )
    .unwrap();
    write_sample(&dir.path().join("odd"), &img).unwrap();
    let mask_path = dir.path().join("mask.png");
    let pred = crackseg(&[
        "predict", "--checkpoint", p(&ckpt), "--image",
        p(&dir.path().join("odd/images/odd.png")), "--out", p(&mask_path),
    ]);
    assert!(pred.status.success(), "{}", stderr(&pred));
    let mask = image::open(&mask_path).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (70, 50));
    assert!(mask.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));
    let overlay = read_rgb(&dir.path().join("mask_overlay.png")).unwrap();
    assert_eq!(overlay.shape(), &[3, 50, 70]);
}

#[test]
fn no_scse_checkpoint_lacks_scse_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let root = synthetic_root(dir.path(), 4);
    assert!(crackseg(&["split", "--root", p(&root)]).status.success());
    let run = dir.path().join("run");
    let out = crackseg(&[
        "train", "--root", p(&root), "--out", p(&run), "--arch", "reduced", "--no-scse",
        "--single-size", "64", "--epochs", "2", "--epochs-stage1", "1", "--lr-max", "0.01",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let names: Vec<String> = read_checkpoint(&run.join("final.ckpt"))
        .unwrap()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| !n.contains("scse")));
}

/// Reduced model whose head bias drives every probability to zero.
fn background_checkpoint(path: &Path) {
    let mut model = Model::<f32>::build(&ModelConfig::reduced()).unwrap();
    let id = model.params.id("head.conv.bias").unwrap();
    model.params.get_mut(id).value = Tensor::full([1], -100.0);
    model.save_checkpoint(path).unwrap();
}

#[test]
fn perfect_prediction_reports_ones_and_black_masks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("blank");
    for i in 0..2 {
        let s = Sample::new(
            format!("b{i}"),
            Tensor::full([3, 64, 64], 0.6),
            Tensor::zeros([1, 64, 64]),
        )
        .unwrap();
        write_sample(&root, &s).unwrap();
    }
    let ckpt = dir.path().join("bg.ckpt");
    background_checkpoint(&ckpt);
    let eval = crackseg(&[
        "evaluate", "--checkpoint", p(&ckpt), "--root", p(&root), "--arch", "reduced",
    ]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert_eq!(stdout(&eval).trim(), "Pr 1.0000 Re 1.0000 F1 1.0000");

    let mask_path = dir.path().join("m.png");
    let pred = crackseg(&[
        "predict", "--checkpoint", p(&ckpt), "--arch", "reduced", "--image",
        p(&root.join("images/b0.png")), "--out", p(&mask_path),
    ]);
    assert!(pred.status.success(), "{}", stderr(&pred));
    let mask = image::open(&mask_path).unwrap().to_luma8();
    assert!(mask.pixels().all(|px| px.0[0] == 0));
}

#[test]
fn mismatched_checkpoint_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let root = synthetic_root(dir.path(), 2);
    let ckpt = dir.path().join("bg.ckpt");
    background_checkpoint(&ckpt);
    let out = crackseg(&[
        "evaluate", "--checkpoint", p(&ckpt), "--root", p(&root), "--arch", "reduced", "--no-scse",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("scse"), "{}", stderr(&out));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let root = synthetic_root(dir.path(), 5);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("dataset_root = {}\nsplit_ratio = 0.4\n", root.display())).unwrap();
    let out = crackseg(&["split", "--config", p(&cfg)]);
    assert_eq!(stdout(&out).trim(), "train: 2, test: 3");
    let out = crackseg(&["split", "--config", p(&cfg), "--ratio", "0.8"]);
    assert_eq!(stdout(&out).trim(), "train: 4, test: 1");
    let bad = crackseg(&["split", "--config", p(&cfg), "--set", "nonsense=1"]);
    assert_eq!(bad.status.code(), Some(2));
}
