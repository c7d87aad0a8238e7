use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle::Device;
use udgan_cli::{Preset, RunConfig};
use udgan_core::data::{DatasetManifest, ManifestEntry, Split};
use udgan_core::metrics::SummaryRow;
use udgan_core::miner::read_pairs_csv;
use udgan_core::nn::{save_checkpoint, CheckpointMeta, UdGan};
use udgan_core::train::{read_metric_log, TrainConfig};

fn udgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udgan"))
        .args(args)
        .env_remove("UDGAN_DEVICE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = udgan(args);
    assert!(
        out.status.success(),
        "udgan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = udgan(args);
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synthetic(dir: &Path, ids: usize, per_id: usize, seed: u64) {
    ok(&["make-synthetic", "--ids", &ids.to_string(), "--per-id", &per_id.to_string(), "--out", s(dir), "--seed", &seed.to_string()]);
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Untrained toy-sized model saved as a checkpoint.
fn untrained_checkpoint(path: &Path, classes: usize) {
    let mut model_cfg = TrainConfig::toy().model;
    model_cfg.num_classes = classes;
    let model = UdGan::new(model_cfg.clone(), 3, &Device::Cpu).unwrap();
    let meta = CheckpointMeta {
        stage: 0,
        epochs_completed: 0,
        model: model_cfg,
        config: serde_json::Value::Null,
    };
    save_checkpoint(path, &model, &meta).unwrap();
}

const TINY_RUN: &str = r#"
[train.stage1]
epochs = 2
warmup_epochs = 1
[train.stage2]
epochs = 1
[train.stage3]
epochs = 1
"#;

#[test]
fn make_synthetic_writes_every_image_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synthetic(&a, 16, 8, 11);
    synthetic(&b, 16, 8, 11);
    let fa = files_under(&a);
    let pngs = fa.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    assert_eq!(pngs, 128);
    let manifest = DatasetManifest::read_csv(&a.join("manifest.csv"), &a).unwrap();
    assert_eq!(manifest.len(), 128);
    let fb = files_under(&b);
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn make_synthetic_rejects_size_incompatible_with_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, err) = code(&["make-synthetic", "--out", s(tmp.path()), "--height", "50"]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("50"), "message should name the bad size: {err}");
}

#[test]
fn later_stages_need_their_predecessor() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic(&data, 4, 4, 1);
    let out = tmp.path().join("run");
    for stage in ["2", "3"] {
        let (c, err) = code(&[
            "train", "--stage", stage, "--preset", "toy", "--source", s(&data), "--target", s(&data), "--out", s(&out),
        ]);
        assert_eq!(c, 3, "{err}");
        assert!(err.contains("stage"), "{err}");
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train.stage1]\nepochz = 3\n").unwrap();
    let (c, err) = code(&["train", "--stage", "1", "--config", s(&cfg), "--dry-run"]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("epochz"), "{err}");

    std::fs::write(&cfg, "[train.stage1]\nepochs = 10\nwarmup_epochs = 10\n").unwrap();
    let (c, err) = code(&["train", "--stage", "1", "--config", s(&cfg), "--dry-run"]);
    assert_eq!(c, 2, "{err}");

    let (c, _) = code(&["train", "--stage", "4"]);
    assert_eq!(c, 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let (c, err) = code(&["train", "--stage", "1", "--preset", "toy", "--source", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(c, 3, "{err}");
}

#[test]
fn dry_run_prints_schedule_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic(&data, 8, 6, 2);
    let out = tmp.path().join("run");
    let text = ok(&[
        "train", "--stage", "3", "--preset", "toy", "--source", s(&data), "--target", s(&data), "--out", s(&out), "--dry-run",
    ]);
    assert!(text.contains("epoch 1 step 1: S"), "{text}");
    assert!(text.contains("epoch 1 step 2: T"), "{text}");
    assert!(!out.exists());
}

#[test]
fn three_stages_run_resume_and_emit_parseable_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, tgt) = (tmp.path().join("src"), tmp.path().join("tgt"));
    synthetic(&src, 6, 6, 3);
    synthetic(&tgt, 6, 6, 4);
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, TINY_RUN).unwrap();
    let out = tmp.path().join("run");
    let args = |stage: &'static str| {
        vec![
            "train".to_string(),
            "--stage".into(),
            stage.into(),
            "--preset".into(),
            "toy".into(),
            "--config".into(),
            s(&cfg).into(),
            "--source".into(),
            s(&src).into(),
            "--target".into(),
            s(&tgt).into(),
            "--out".into(),
            s(&out).into(),
            "--quiet".into(),
        ]
    };
    let run = |stage: &'static str| {
        let a = args(stage);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    for (k, stage) in ["1", "2", "3"].into_iter().enumerate() {
        run(stage);
        let ckpt = out.join(format!("stage{stage}.ckpt"));
        assert!(ckpt.is_file());
        let rows = read_metric_log(&out.join(format!("stage{stage}_metrics.csv"))).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.stage as usize == k + 1));
    }
    // Effective configuration reflects the merged document and flags.
    let written = std::fs::read_to_string(out.join("config.toml")).unwrap();
    let effective = RunConfig::from_toml(&written, Preset::Default).unwrap();
    assert_eq!(effective.train.stage1.epochs, 2);
    assert_eq!(effective.out, out);
    assert_eq!(effective.source.root.as_deref(), Some(src.as_path()));

    // Resume: a completed stage is not retrained.
    let before = std::fs::read(out.join("stage1.ckpt")).unwrap();
    let again = run("1");
    assert!(again.contains("already complete"), "{again}");
    assert_eq!(std::fs::read(out.join("stage1.ckpt")).unwrap(), before);

    // Stage-3 pairs CSV parses against the target manifest.
    let manifest = DatasetManifest::read_csv(&tgt.join("manifest.csv"), &tgt).unwrap();
    let pairs = read_pairs_csv(&out.join("target_pairs.csv"), &manifest, &manifest.train_indices()).unwrap();
    assert!(!pairs.is_empty());
}

#[test]
fn retraining_with_a_changed_config_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic(&data, 4, 4, 5);
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, TINY_RUN).unwrap();
    let out = tmp.path().join("run");
    let base = ["train", "--stage", "1", "--preset", "toy", "--config", s(&cfg), "--source", s(&data), "--out", s(&out), "--quiet"];
    ok(&base);
    let mut reseeded = base.to_vec();
    reseeded.extend(["--seed", "9"]);
    let (c, err) = code(&reseeded);
    assert_eq!(c, 2, "{err}");
    reseeded.push("--force");
    ok(&reseeded);
}

/// Query images copied into the gallery under another camera: any encoder
/// retrieves them first.
fn perfect_gallery(dir: &Path) -> DatasetManifest {
    let src = dir.join("src");
    synthetic(&src, 6, 6, 8);
    let manifest = DatasetManifest::read_csv(&src.join("manifest.csv"), &src).unwrap();
    let mut entries: Vec<ManifestEntry> = manifest.entries().iter().filter(|e| e.split != Split::Gallery).cloned().collect();
    let cameras = manifest.num_cameras();
    let copies: Vec<ManifestEntry> = entries
        .iter()
        .filter(|e| e.split == Split::Query)
        .map(|e| {
            let name = format!("copy_{}", e.path.rsplit('/').next().unwrap());
            let path = format!("gallery/{name}");
            std::fs::create_dir_all(src.join("gallery")).unwrap();
            std::fs::copy(src.join(&e.path), src.join(&path)).unwrap();
            ManifestEntry {
                path,
                identity: e.identity,
                camera: e.camera % cameras + 1,
                split: Split::Gallery,
            }
        })
        .collect();
    entries.extend(copies);
    let perfect = DatasetManifest::from_entries(&src, entries).unwrap();
    perfect.write_csv(&src.join("manifest.csv")).unwrap();
    perfect
}

#[test]
fn evaluate_reports_perfect_retrieval() {
    let tmp = tempfile::tempdir().unwrap();
    perfect_gallery(tmp.path());
    let ckpt = tmp.path().join("model.ckpt");
    untrained_checkpoint(&ckpt, 6);
    let out = tmp.path().join("eval");
    let data = tmp.path().join("src");
    ok(&[
        "evaluate", "--preset", "toy", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out), "--tag", "perfect",
    ]);
    let rows = SummaryRow::read_csv(&out.join("eval_summary.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].tag, "perfect");
    assert_eq!(rows[0].rank1, 1.0);
    let per_query = csv::Reader::from_path(out.join("eval_per_query.csv")).unwrap().records().count();
    assert_eq!(per_query, rows[0].num_valid_queries);
}

fn precision(report: &str) -> Option<f64> {
    report.lines().find_map(|l| l.strip_prefix("precision: ")?.parse().ok())
}

#[test]
fn mine_pairs_reports_precision_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic(&data, 6, 6, 6);
    let ckpt = tmp.path().join("model.ckpt");
    untrained_checkpoint(&ckpt, 6);
    let out = tmp.path().join("mine");
    let args = ["mine-pairs", "--preset", "toy", "--checkpoint", s(&ckpt), "--target", s(&data), "--out", s(&out), "--labels"];
    ok(&args);
    let report = std::fs::read_to_string(out.join("mining_report.txt")).unwrap();
    assert!(precision(&report).is_some(), "{report}");
    let first: Vec<Vec<u8>> = files_under(&out).iter().map(|p| std::fs::read(p).unwrap()).collect();
    ok(&args);
    let second: Vec<Vec<u8>> = files_under(&out).iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);

    let plain = tmp.path().join("plain");
    ok(&["mine-pairs", "--preset", "toy", "--checkpoint", s(&ckpt), "--target", s(&data), "--out", s(&plain)]);
    let report = std::fs::read_to_string(plain.join("mining_report.txt")).unwrap();
    assert!(precision(&report).is_none(), "{report}");
}

#[test]
fn generate_grid_lays_out_three_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic(&data, 6, 4, 9);
    let ckpt = tmp.path().join("model.ckpt");
    untrained_checkpoint(&ckpt, 6);
    let out = tmp.path().join("grid");
    ok(&["generate-grid", "--preset", "toy", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out), "--pairs", "6"]);
    let size = TrainConfig::toy().model.image_size;
    let grid = image::open(out.join("grid.png")).unwrap();
    assert_eq!((grid.width() as usize, grid.height() as usize), (6 * size.width, 3 * size.height));
    let listed = csv::Reader::from_path(out.join("grid_pairs.csv")).unwrap().records().count();
    assert_eq!(listed, 6);
}

#[test]
fn commands_without_a_checkpoint_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic(&data, 4, 4, 1);
    let (c, err) = code(&["evaluate", "--preset", "toy", "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(c, 3, "{err}");
}
