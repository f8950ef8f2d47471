use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, PhantomSpec};
use super::record::SliceRecord;
use super::volume::slice_volume;
use crate::error::{Error, Result};
use crate::numerics::io::{load_tensor, save_tensor};
use crate::numerics::Tensor;

pub const DATASET_MANIFEST: &str = "manifest.txt";
pub const IMAGE_FILE: &str = "image.dkt";
pub const TUMOR_FILE: &str = "tumor_mask.dkt";
pub const HEALTHY_FILE: &str = "healthy_mask.dkt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub split: Split,
}

/// Write one subject's `[D,H,W]` volumes into `root/<subject_id>/`.
pub fn write_subject(
    root: &Path,
    subject_id: &str,
    image: &Tensor,
    tumor_mask: &Tensor,
    healthy_mask: &Tensor,
) -> Result<PathBuf> {
    if subject_id.is_empty() || subject_id.contains(['/', '\\', '\t', '\n']) {
        return Err(Error::Validation(format!("unusable subject id {subject_id:?}")));
    }
    let dir = root.join(subject_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_tensor(dir.join(IMAGE_FILE), image)?;
    save_tensor(dir.join(TUMOR_FILE), tumor_mask)?;
    save_tensor(dir.join(HEALTHY_FILE), healthy_mask)?;
    Ok(dir)
}

pub fn write_manifest(root: &Path, entries: &[SubjectEntry]) -> Result<()> {
    let text: String = entries
        .iter()
        .map(|e| format!("{}\t{}\n", e.subject_id, e.split))
        .collect();
    let path = root.join(DATASET_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<SubjectEntry>> {
    let path = root.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format {
            path: path.clone(),
            detail: format!("line {}: {detail}", n + 1),
        };
        let mut parts = line.split('\t');
        let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected `subject<TAB>split`".into()));
        };
        out.push(SubjectEntry {
            subject_id: id.to_string(),
            split: split.parse().map_err(bad)?,
        });
    }
    Ok(out)
}

/// Synthetic dataset parameters: `subjects` phantoms, one slice each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomDatasetConfig {
    pub subjects: usize,
    pub val_subjects: usize,
    pub seed: u64,
    pub phantom: PhantomSpec,
}

impl Default for PhantomDatasetConfig {
    fn default() -> Self {
        PhantomDatasetConfig {
            subjects: 8,
            val_subjects: 2,
            seed: 0,
            phantom: PhantomSpec::default(),
        }
    }
}

/// Phantom records with a subject-disjoint split. Phantom `i` uses seed
/// `seed + i`; validation subjects are drawn by a seeded shuffle.
pub fn phantom_records(cfg: &PhantomDatasetConfig) -> Result<Vec<(SliceRecord, Split)>> {
    if cfg.subjects == 0 || cfg.val_subjects > cfg.subjects {
        return Err(Error::Config(format!(
            "need 0 < subjects and val_subjects <= subjects, got {} / {}",
            cfg.subjects, cfg.val_subjects
        )));
    }
    let mut order: Vec<usize> = (0..cfg.subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let val: Vec<usize> = order[..cfg.val_subjects].to_vec();
    (0..cfg.subjects)
        .map(|i| {
            let rec = generate_phantom(&cfg.phantom.with_seed(cfg.seed.wrapping_add(i as u64)))?;
            let split = if val.contains(&i) { Split::Val } else { Split::Train };
            Ok((rec, split))
        })
        .collect()
}

/// Write a phantom dataset under `root`; each phantom is a one-slice volume.
pub fn write_phantom_dataset(root: &Path, cfg: &PhantomDatasetConfig) -> Result<Vec<SubjectEntry>> {
    let records = phantom_records(cfg)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for (rec, split) in records {
        write_subject(root, &rec.subject_id, &rec.image, &rec.tumor_mask, &rec.healthy_mask)?;
        entries.push(SubjectEntry {
            subject_id: rec.subject_id,
            split,
        });
    }
    write_manifest(root, &entries)?;
    Ok(entries)
}

/// Load every subject of `split` (all splits when `None`) and slice it.
/// `crop` defaults to the full in-plane size.
pub fn load_dataset(root: &Path, split: Option<Split>, crop: Option<usize>) -> Result<Vec<SliceRecord>> {
    if !root.is_dir() {
        return Err(Error::Config(format!("data directory {} does not exist", root.display())));
    }
    let mut out = Vec::new();
    for entry in read_manifest(root)? {
        if split.is_some_and(|s| s != entry.split) {
            continue;
        }
        let dir = root.join(&entry.subject_id);
        let image = load_tensor(dir.join(IMAGE_FILE))?;
        let tumor = load_tensor(dir.join(TUMOR_FILE))?;
        let healthy = load_tensor(dir.join(HEALTHY_FILE))?;
        let crop = match crop {
            Some(c) => c,
            None => match image.shape() {
                [_, h, w] => (*h).min(*w),
                s => return Err(Error::dim("load_dataset", "rank", format!("expected [D,H,W], got {s:?}"))),
            },
        };
        out.extend(slice_volume(&image, &tumor, &healthy, crop, &entry.subject_id)?);
    }
    Ok(out)
}
