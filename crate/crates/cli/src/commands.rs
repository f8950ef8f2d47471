use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffkan_core::data::{load_dataset, phantom_records, slice_volume, write_phantom_dataset, SliceRecord, Split, SubjectEntry};
use diffkan_core::diffusion::{Trainer, TrainingPair};
use diffkan_core::metrics::{
    format_psnr, masked_psnr, published_reference, EvalReport, EvalRow,
};
use diffkan_core::numerics::io::{load_params_into, load_tensor, save_params, save_tensor};
use diffkan_core::numerics::Tensor;
use diffkan_core::repaint::{boundary_smoothness, inpaint, InpaintTask};
use diffkan_core::ukan::{parse_arch, tumor_geometry, Denoiser, UkanDenoiser};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::{CliError, CliResult};

pub const LOSS_FILE: &str = "loss.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const RUN_MANIFEST: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const REFERENCES_DIR: &str = "references";
pub const PREVIEWS_DIR: &str = "previews";
pub const RECORDS_DIR: &str = "records";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
/// Per-task input files inside a task directory.
pub const TASK_IMAGE: &str = "image.dkt";
pub const TASK_MASK: &str = "mask.dkt";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(path, &text)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let to_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Hex SHA-256 of the little-endian values of `t`.
pub fn tensor_checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// 8-bit grayscale preview of a single plane with values in `[0, 1]`.
pub fn write_png(path: &Path, plane: &Tensor) -> CliResult<()> {
    let s = plane.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let bytes = plane.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| CliError::Runtime("preview buffer size mismatch".into()))?;
    img.save(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Records of `split` from the configured directory, or from freshly
/// generated phantoms when no directory is set.
pub fn load_records(cfg: &RunConfig, split: Option<Split>) -> CliResult<Vec<SliceRecord>> {
    let records = match &cfg.data.dir {
        Some(dir) => load_dataset(dir, split, cfg.data.crop)?,
        None => {
            let mut out = Vec::new();
            for (rec, s) in phantom_records(&cfg.data.phantoms)? {
                if split.is_some_and(|want| want != s) {
                    continue;
                }
                let [_, h, w] = rec.image.shape() else { unreachable!() };
                let crop = cfg.data.crop.unwrap_or((*h).min(*w));
                out.extend(slice_volume(&rec.image, &rec.tumor_mask, &rec.healthy_mask, crop, &rec.subject_id)?);
            }
            out
        }
    };
    if records.is_empty() {
        return Err(CliError::Data("no slices selected for this run".into()));
    }
    let m = cfg.model.spatial_multiple();
    for r in &records {
        let s = r.image.shape();
        if s[1] % m != 0 || s[2] % m != 0 {
            return Err(CliError::Config(format!(
                "slice {} is {}x{}, not divisible by {m}",
                r.id(),
                s[1],
                s[2]
            )));
        }
    }
    Ok(records)
}

/// The healthy-tissue mask is the region the model learns to fill.
pub fn training_pairs(records: &[SliceRecord]) -> Vec<TrainingPair> {
    records
        .iter()
        .map(|r| TrainingPair {
            image: r.image.clone(),
            mask: r.healthy_mask.clone(),
        })
        .collect()
}

pub fn cmd_gen_data(cfg: &RunConfig) -> CliResult<Vec<SubjectEntry>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let entries = write_phantom_dataset(out, &cfg.data.phantoms)?;
    cfg.save(out)?;
    Ok(entries)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub t: usize,
    pub beta: f64,
    pub alpha_bar: f64,
}

/// Everything needed to replay a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub parameters: usize,
    pub wall_seconds: f64,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub parameters: usize,
    pub wall_seconds: f64,
    pub model: UkanDenoiser,
}

/// Train and write the EMA checkpoint, loss curve, schedule and manifest.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let data = training_pairs(&load_records(cfg, cfg.data.train_split)?);
    let net = UkanDenoiser::new(cfg.model.clone(), schedule.timesteps(), cfg.seed)?;
    let parameters = net.count_parameters();
    let mut trainer = Trainer::new(net, schedule.clone(), cfg.train, cfg.seed)?;

    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.train.steps);
    for _ in 0..cfg.train.steps {
        losses.push(trainer.step(&data)?);
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    let model = trainer.ema_model()?;

    let out = &cfg.output_dir;
    cfg.save(out)?;
    save_params(out.join(CHECKPOINT_DIR), model.store())?;
    let rows: Vec<LossRow> = losses.iter().enumerate().map(|(i, &loss)| LossRow { step: i + 1, loss }).collect();
    write_csv(&out.join(LOSS_FILE), &rows)?;
    let rows: Vec<ScheduleRow> = (1..=schedule.timesteps())
        .map(|t| ScheduleRow {
            t,
            beta: schedule.beta(t),
            alpha_bar: schedule.alpha_bar(t),
        })
        .collect();
    write_csv(&out.join(SCHEDULE_FILE), &rows)?;
    write_json(
        &out.join(RUN_MANIFEST),
        &RunManifest {
            command: "train".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            parameters,
            wall_seconds,
            config: cfg.clone(),
        },
    )?;
    Ok(TrainOutcome {
        losses,
        parameters,
        wall_seconds,
        model,
    })
}

/// Load the model saved by [`cmd_train`] in `dir`. With `expected`, the
/// stored model and schedule must match it.
pub fn load_checkpoint(dir: &Path, expected: Option<&RunConfig>) -> CliResult<(RunConfig, UkanDenoiser)> {
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.is_file() || !dir.join(CHECKPOINT_DIR).is_dir() {
        return Err(CliError::Config(format!("no checkpoint found at {}", dir.display())));
    }
    let stored = RunConfig::load(&cfg_path)?;
    if let Some(want) = expected {
        if want.model != stored.model {
            return Err(CliError::Incompatible("checkpoint was trained with a different model config".into()));
        }
        if want.schedule != stored.schedule {
            return Err(CliError::Incompatible("checkpoint was trained with a different schedule".into()));
        }
    }
    let mut net = UkanDenoiser::new(stored.model.clone(), stored.schedule.timesteps, stored.seed)?;
    load_params_into(dir.join(CHECKPOINT_DIR), net.store_mut())?;
    Ok((stored, net))
}

/// One image to inpaint.
#[derive(Clone, Debug)]
pub struct NamedTask {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

fn as_batch(t: Tensor, path: &Path) -> CliResult<Tensor> {
    let s = t.shape().to_vec();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(CliError::Data(format!("{}: expected a single plane, got {s:?}", path.display())));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok(t.reshape(vec![1, 1, h, w])?)
}

/// Tasks from `dir/<id>/{image,mask}.dkt`, in id order.
pub fn read_task_dir(dir: &Path) -> CliResult<Vec<NamedTask>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let (ip, mp) = (dir.join(&id).join(TASK_IMAGE), dir.join(&id).join(TASK_MASK));
            Ok(NamedTask {
                image: as_batch(load_tensor(&ip)?, &ip)?,
                mask: as_batch(load_tensor(&mp)?, &mp)?,
                id,
            })
        })
        .collect()
}

pub fn write_task_dir(dir: &Path, tasks: &[NamedTask]) -> CliResult<()> {
    for t in tasks {
        let d = dir.join(&t.id);
        create_dir(&d)?;
        save_tensor(d.join(TASK_IMAGE), &t.image)?;
        save_tensor(d.join(TASK_MASK), &t.mask)?;
    }
    Ok(())
}

/// Inpainting tasks from dataset records, masking the healthy region.
pub fn record_tasks(records: &[SliceRecord]) -> CliResult<Vec<NamedTask>> {
    records
        .iter()
        .map(|r| {
            let s = r.image.shape();
            let shape = vec![1, 1, s[1], s[2]];
            Ok(NamedTask {
                id: r.id(),
                image: r.image.clone().reshape(shape.clone())?,
                mask: r.healthy_mask.clone().reshape(shape)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub masked_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
    pub boundary_smoothness: Option<f64>,
}

/// Per-task record written next to each output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InpaintRecord {
    pub id: String,
    pub seed: u64,
    pub checksum: String,
    pub checkpoint: PathBuf,
    pub inpaint: diffkan_core::repaint::InpaintConfig,
    pub metrics: TaskMetrics,
}

/// Inpaint every task with seed `cfg.seed + index`. Writes the prediction,
/// the reference image, a PNG preview and a JSON record per task.
pub fn cmd_inpaint(cfg: &RunConfig, checkpoint: &Path, tasks: &[NamedTask]) -> CliResult<Vec<InpaintRecord>> {
    cfg.validate()?;
    let (stored, net) = load_checkpoint(checkpoint, Some(cfg))?;
    let schedule = stored.schedule.build()?;
    let out = &cfg.output_dir;
    let dirs = [PREDICTIONS_DIR, REFERENCES_DIR, PREVIEWS_DIR, RECORDS_DIR].map(|d| out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    cfg.save(out)?;
    let mut records = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        let geometry = tumor_geometry(&task.mask.index_outer(0)?)?;
        let job = InpaintTask {
            image: task.image.clone(),
            mask: task.mask.clone(),
            tumor: vec![geometry],
        };
        let pred = inpaint(&net, &schedule, &job, &cfg.inpaint, seed)?;
        let row = EvalRow::compute(&task.id, &pred, &task.image)?;
        let has_mask = task.mask.data().iter().any(|&m| m != 0.0);
        let metrics = TaskMetrics {
            masked_psnr: if has_mask { masked_psnr(&pred, &task.image, &task.mask, 1.0)? } else { f64::INFINITY },
            psnr: row.psnr,
            ssim: row.ssim,
            mse: row.mse,
            mae: row.mae,
            boundary_smoothness: boundary_smoothness(&pred, &task.mask).ok(),
        };
        save_tensor(dirs[0].join(format!("{}.dkt", task.id)), &pred)?;
        save_tensor(dirs[1].join(format!("{}.dkt", task.id)), &task.image)?;
        write_png(&dirs[2].join(format!("{}.png", task.id)), &pred)?;
        let record = InpaintRecord {
            id: task.id.clone(),
            seed,
            checksum: tensor_checksum(&pred),
            checkpoint: checkpoint.to_path_buf(),
            inpaint: cfg.inpaint,
            metrics,
        };
        write_json(&dirs[3].join(format!("{}.json", task.id)), &record)?;
        records.push(record);
    }
    Ok(records)
}

fn dkt_files(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "dkt"))
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
        .collect();
    out.sort();
    Ok(out)
}

/// Compare predictions and references matched by file stem. Writes the
/// per-image CSV and a summary table into `out`.
pub fn cmd_evaluate(pred_dir: &Path, ref_dir: &Path, out: &Path, paper_reference: bool) -> CliResult<EvalReport> {
    let preds = dkt_files(pred_dir)?;
    let refs = dkt_files(ref_dir)?;
    let pred_ids: Vec<&String> = preds.iter().map(|(id, _)| id).collect();
    let ref_ids: Vec<&String> = refs.iter().map(|(id, _)| id).collect();
    let unmatched: Vec<String> = pred_ids
        .iter()
        .filter(|id| !ref_ids.contains(id))
        .chain(ref_ids.iter().filter(|id| !pred_ids.contains(id)))
        .map(|id| id.to_string())
        .collect();
    if !unmatched.is_empty() {
        return Err(CliError::Data(format!("unmatched ids: {}", unmatched.join(", "))));
    }
    if preds.is_empty() {
        return Err(CliError::Data(format!("no .dkt files in {}", pred_dir.display())));
    }
    let rows = preds
        .iter()
        .zip(&refs)
        .map(|((id, pp), (_, rp))| Ok(EvalRow::compute(id, &load_tensor(pp)?, &load_tensor(rp)?)?))
        .collect::<CliResult<Vec<_>>>()?;
    let method = pred_dir.display().to_string();
    let mut report = EvalReport::new(method, rows);
    if paper_reference {
        report.reference = published_reference();
    }
    create_dir(out)?;
    write_csv(&out.join(METRICS_FILE), &report.rows)?;
    write_text(&out.join(SUMMARY_FILE), &report.summary_table()?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arch: String,
    pub parameters: usize,
    pub train_seconds: f64,
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
}

/// Train, inpaint and evaluate each configured architecture under
/// `output_dir/<arch>/{train,inpaint,eval}`.
pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<Vec<AblationRow>> {
    cfg.validate()?;
    let archs = cfg
        .ablation
        .archs
        .iter()
        .map(|a| parse_arch(a))
        .collect::<Result<Vec<_>, _>>()?;
    for arch in &archs {
        let mut sub = cfg.clone();
        sub.model.arch = arch.clone();
        sub.validate()?;
    }
    let mut rows = Vec::with_capacity(archs.len());
    for arch in archs {
        let name = String::from(arch.clone());
        let base = cfg.output_dir.join(&name);
        let mut train_cfg = cfg.clone();
        train_cfg.model.arch = arch;
        train_cfg.output_dir = base.join("train");
        let outcome = cmd_train(&train_cfg)?;

        let mut inpaint_cfg = train_cfg.clone();
        inpaint_cfg.output_dir = base.join("inpaint");
        let tasks = record_tasks(&load_records(&inpaint_cfg, inpaint_cfg.data.inpaint_split)?)?;
        cmd_inpaint(&inpaint_cfg, &train_cfg.output_dir, &tasks)?;
        let report = cmd_evaluate(
            &inpaint_cfg.output_dir.join(PREDICTIONS_DIR),
            &inpaint_cfg.output_dir.join(REFERENCES_DIR),
            &base.join("eval"),
            false,
        )?;
        let agg = report.aggregate()?;
        rows.push(AblationRow {
            arch: name,
            parameters: outcome.parameters,
            train_seconds: outcome.wall_seconds,
            final_loss: *outcome.losses.last().unwrap_or(&f64::NAN),
            psnr: agg.psnr,
            ssim: agg.ssim,
            mse: agg.mse,
            mae: agg.mae,
        });
    }
    create_dir(&cfg.output_dir)?;
    write_csv(&cfg.output_dir.join(ABLATION_FILE), &rows)?;
    write_text(&cfg.output_dir.join(SUMMARY_FILE), &ablation_table(&rows))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<8} {:>10} {:>10} {:>10} {:>8} {:>8}\n",
        "Arch", "Params", "Train s", "PSNR", "SSIM", "MSE"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>10} {:>10.1} {:>10} {:>8.4} {:>8.4}\n",
            r.arch,
            r.parameters,
            r.train_seconds,
            format_psnr(r.psnr),
            r.ssim,
            r.mse
        ));
    }
    out
}
