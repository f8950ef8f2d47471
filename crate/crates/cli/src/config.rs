use std::path::{Path, PathBuf};

use diffkan_core::data::{PhantomDatasetConfig, Split};
use diffkan_core::diffusion::{ScheduleConfig, TrainConfig};
use diffkan_core::repaint::InpaintConfig;
use diffkan_core::ukan::{parse_arch, UkanConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Name of the config file written next to every run's outputs.
pub const CONFIG_FILE: &str = "config.toml";

/// Where training and inpainting images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory with a manifest; phantoms are generated when unset.
    pub dir: Option<PathBuf>,
    /// Center crop applied while slicing; full size when unset.
    pub crop: Option<usize>,
    /// Split used for training; every split when unset.
    pub train_split: Option<Split>,
    /// Split inpainted when no task directory is given; every split when unset.
    pub inpaint_split: Option<Split>,
    pub phantoms: PhantomDatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            crop: None,
            train_split: Some(Split::Train),
            inpaint_split: Some(Split::Val),
            phantoms: PhantomDatasetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub archs: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            archs: ["CCCCK", "CCCKK", "CCKKK", "CKKKK"].map(String::from).to_vec(),
        }
    }
}

/// Everything a run depends on besides its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: UkanConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub inpaint: InpaintConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: UkanConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            inpaint: InpaintConfig::default(),
            data: DataConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        if self.inpaint.resample_jumps == 0 {
            return Err(CliError::Config("inpaint.resample_jumps must be at least 1".into()));
        }
        if self.data.dir.is_none() {
            let p = &self.data.phantoms.phantom;
            let m = self.model.spatial_multiple();
            let (h, w) = match self.data.crop {
                Some(c) => (c, c),
                None => (p.height, p.width),
            };
            if h % m != 0 || w % m != 0 {
                return Err(CliError::Config(format!(
                    "image size {h}x{w} is not divisible by {m} for architecture {}",
                    String::from(self.model.arch.clone())
                )));
            }
        }
        for arch in &self.ablation.archs {
            parse_arch(arch)?;
        }
        Ok(())
    }
}
