use std::path::Path;
use std::process::Command;

use diffkan_cli::*;
use diffkan_core::metrics::REFERENCE_LABEL;
use diffkan_core::numerics::io::{load_tensor, save_tensor};
use diffkan_core::numerics::Tensor;
use diffkan_core::ukan::parse_arch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.output_dir = dir.to_path_buf();
    cfg.model.arch = parse_arch("CK").unwrap();
    cfg.model.base_channels = 4;
    cfg.model.embed_dim = 16;
    cfg.model.encoder_channels = 4;
    cfg.schedule.timesteps = 20;
    cfg.schedule.beta_start = 1e-3;
    cfg.schedule.beta_end = 0.2;
    cfg.train.steps = 8;
    cfg.data.phantoms.subjects = 4;
    cfg.data.phantoms.val_subjects = 2;
    cfg.data.phantoms.phantom.height = 16;
    cfg.data.phantoms.phantom.width = 16;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffkan"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn defaults_match_published_constants() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.schedule.timesteps, 1000);
    assert_eq!(cfg.train.lr, 1e-4);
    assert_eq!(cfg.train.batch_size, 2);
    assert_eq!(cfg.train.ema_rate, 0.995);
    assert_eq!(String::from(cfg.model.arch.clone()), "CCKKK");
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(CliError::Config(_))));
}

#[test]
fn invalid_arch_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[model]\narch = \"CXK\"\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CXK"));
}

#[test]
fn indivisible_dims_fail_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&tmp.path().join("run"));
    cfg.data.phantoms.phantom.height = 18;
    cfg.data.phantoms.phantom.width = 18;
    assert!(matches!(cmd_train(&cfg), Err(CliError::Config(_))));
    assert!(!cfg.output_dir.exists());
    cfg.data.phantoms.phantom.height = 16;
    cfg.data.phantoms.phantom.width = 16;
    cfg.data.dir = Some(tmp.path().join("missing"));
    assert_eq!(cmd_train(&cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn training_is_reproducible_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = cmd_train(&tiny(&tmp.path().join("a"))).unwrap();
    let b = cmd_train(&tiny(&tmp.path().join("b"))).unwrap();
    assert_eq!(a.losses, b.losses);
    let dir = tmp.path().join("a");
    for f in [CONFIG_FILE, LOSS_FILE, SCHEDULE_FILE, RUN_MANIFEST] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert!(dir.join(CHECKPOINT_DIR).is_dir());
    let csv = std::fs::read_to_string(dir.join(LOSS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 9);
    let schedule = std::fs::read_to_string(dir.join(SCHEDULE_FILE)).unwrap();
    assert_eq!(schedule.lines().count(), 21);
    let replay = RunConfig::load(&dir.join(CONFIG_FILE)).unwrap();
    assert_eq!(replay, tiny(&dir));
}

#[test]
fn generated_dataset_trains_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg_path = write_config(tmp.path(), &tiny(&data));
    let out = bin().args(["gen-data", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut cfg = tiny(&tmp.path().join("run"));
    cfg.data.dir = Some(data);
    let cfg_path = write_config(tmp.path(), &cfg);
    let out = bin().args(["train", "--seed", "5", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stored = RunConfig::load(&tmp.path().join("run").join(CONFIG_FILE)).unwrap();
    assert_eq!(stored.seed, 5);
}

fn trained(dir: &Path) -> RunConfig {
    let cfg = tiny(&dir.join("train"));
    cmd_train(&cfg).unwrap();
    cfg
}

fn seeded_tasks(n: usize) -> Vec<NamedTask> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| NamedTask {
            id: format!("task-{i}"),
            image: Tensor::rand_uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut r),
            mask: Tensor::from_fn(vec![1, 1, 16, 16], |p| f64::from((p / 16) % 8 == i && p % 16 > 4)),
        })
        .collect()
}

#[test]
fn inpaint_outputs_are_stable_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let train = trained(tmp.path());
    let tasks = seeded_tasks(5);
    let run = |name: &str| {
        let mut cfg = train.clone();
        cfg.output_dir = tmp.path().join(name);
        cmd_inpaint(&cfg, &train.output_dir, &tasks).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a.len(), 5);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.checksum, y.checksum);
        let base = tmp.path().join("a");
        assert!(base.join(PREDICTIONS_DIR).join(format!("{}.dkt", x.id)).is_file());
        assert!(base.join(PREVIEWS_DIR).join(format!("{}.png", x.id)).is_file());
        assert!(base.join(RECORDS_DIR).join(format!("{}.json", x.id)).is_file());
    }
    let seeds: Vec<u64> = a.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![3, 4, 5, 6, 7]);
}

#[test]
fn empty_mask_task_returns_input() {
    let tmp = tempfile::tempdir().unwrap();
    let train = trained(tmp.path());
    let mut task = seeded_tasks(1).remove(0);
    task.mask = Tensor::zeros(vec![1, 1, 16, 16]);
    let mut cfg = train.clone();
    cfg.output_dir = tmp.path().join("out");
    let rec = cmd_inpaint(&cfg, &train.output_dir, std::slice::from_ref(&task)).unwrap();
    let out = load_tensor(cfg.output_dir.join(PREDICTIONS_DIR).join("task-0.dkt")).unwrap();
    let rounded = load_tensor({
        let p = tmp.path().join("in.dkt");
        save_tensor(&p, &task.image).unwrap();
        p
    })
    .unwrap();
    assert_eq!(out, rounded);
    assert_eq!(rec[0].metrics.mse, 0.0);
}

#[test]
fn inpaint_rejects_missing_and_mismatched_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["inpaint", "--checkpoint"]).arg(tmp.path().join("nope")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));

    let train = trained(tmp.path());
    let mut other = train.clone();
    other.model.base_channels = 8;
    other.output_dir = tmp.path().join("other");
    let err = cmd_inpaint(&other, &train.output_dir, &seeded_tasks(1)).unwrap_err();
    assert!(matches!(err, CliError::Incompatible(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn inpaint_binary_reads_task_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let train = trained(tmp.path());
    let tasks_dir = tmp.path().join("tasks");
    write_task_dir(&tasks_dir, &seeded_tasks(2)).unwrap();
    let out = bin()
        .args(["inpaint", "--checkpoint"])
        .arg(&train.output_dir)
        .arg("--tasks")
        .arg(&tasks_dir)
        .arg("--out")
        .arg(tmp.path().join("pred"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

fn write_set(dir: &Path, items: &[(&str, Tensor)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (id, t) in items {
        save_tensor(dir.join(format!("{id}.dkt")), t).unwrap();
    }
}

#[test]
fn evaluate_identical_and_offset_sets() {
    let tmp = tempfile::tempdir().unwrap();
    // Multiples of 1/8 survive the f32 round trip exactly.
    let base = Tensor::from_fn(vec![1, 1, 16, 16], |i| (i % 5) as f64 / 8.0);
    let offset = base.map(|v| v + 0.125);
    write_set(&tmp.path().join("ref"), &[("a", base.clone()), ("b", base.clone())]);
    write_set(&tmp.path().join("same"), &[("a", base.clone()), ("b", base.clone())]);
    write_set(&tmp.path().join("mixed"), &[("a", base.clone()), ("b", offset)]);

    let report = cmd_evaluate(&tmp.path().join("same"), &tmp.path().join("ref"), &tmp.path().join("e1"), false).unwrap();
    for r in &report.rows {
        assert_eq!((r.psnr, r.ssim, r.mse), (f64::INFINITY, 1.0, 0.0));
    }
    let report = cmd_evaluate(&tmp.path().join("mixed"), &tmp.path().join("ref"), &tmp.path().join("e2"), true).unwrap();
    let b = &report.rows[1];
    assert_eq!(b.mse, 0.015625);
    assert!((b.psnr - 10.0 * (1.0f64 / 0.015625).log10()).abs() < 1e-12);
    let agg = report.aggregate().unwrap();
    let mean = |f: fn(&diffkan_core::metrics::EvalRow) -> f64| report.rows.iter().map(f).sum::<f64>() / 2.0;
    assert!((agg.mse - mean(|r| r.mse)).abs() < 1e-12);
    assert!((agg.ssim - mean(|r| r.ssim)).abs() < 1e-12);
    let summary = std::fs::read_to_string(tmp.path().join("e2").join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.matches(REFERENCE_LABEL).count(), 4);
    let csv = std::fs::read_to_string(tmp.path().join("e2").join(METRICS_FILE)).unwrap();
    assert!(csv.starts_with("image_id,psnr,ssim,mse,mae"));
    assert!(csv.contains("inf"));
}

#[test]
fn evaluate_lists_unmatched_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Tensor::zeros(vec![12, 12]);
    write_set(&tmp.path().join("p"), &[("a", t.clone()), ("x", t.clone())]);
    write_set(&tmp.path().join("r"), &[("a", t.clone()), ("y", t)]);
    let out = bin()
        .arg("evaluate")
        .arg("--pred")
        .arg(tmp.path().join("p"))
        .arg("--ref")
        .arg(tmp.path().join("r"))
        .arg("--out")
        .arg(tmp.path().join("e"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('x') && err.contains('y'));
    assert!(!tmp.path().join("e").exists());
}

#[test]
fn ablate_rejects_bad_arch_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&tmp.path().join("ablate"));
    cfg.ablation.archs = vec!["CK".into(), "CXK".into()];
    assert!(matches!(cmd_ablate(&cfg), Err(CliError::Config(_))));
    assert!(!cfg.output_dir.exists());
}

#[test]
fn single_arch_ablation_writes_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&tmp.path().join("ablate"));
    cfg.ablation.archs = vec!["CK".into()];
    let rows = cmd_ablate(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    let csv = std::fs::read_to_string(cfg.output_dir.join(ABLATION_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(ablation_table(&rows).contains("CK"));
}
