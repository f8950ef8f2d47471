use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ema::{EmaState, DEFAULT_EMA_RATE};
use super::loss::{diffusion_loss, LossConfig};
use super::sampler::{masked_model_scan, to_model_space};
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Ctx, Mode, Tape, Tensor};
use crate::ukan::{tumor_geometry, Denoiser, TumorGeometry, UkanDenoiser};

/// One training image with the region the model learns to fill in.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// `[1,H,W]` intensities in `[0, 1]`.
    pub image: Tensor,
    /// `[1,H,W]` binary, 1 inside the region to inpaint.
    pub mask: Tensor,
}

impl TrainingPair {
    /// The model-space image with the masked region zeroed.
    pub fn masked_scan(&self) -> Result<Tensor> {
        masked_model_scan(&self.image, &self.mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub ema_rate: f64,
    /// Probability of replacing a sample's geometry with the empty sentinel.
    pub condition_dropout: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            steps: 500,
            batch_size: 2,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            ema_rate: DEFAULT_EMA_RATE,
            condition_dropout: 0.0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::Config("condition_dropout must lie in [0, 1]".into()));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(Error::Config(format!("EMA rate must lie in (0, 1), got {}", self.ema_rate)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Single-writer training state: model, optimizer, EMA and data order.
pub struct Trainer {
    net: UkanDenoiser,
    schedule: DiffusionSchedule,
    config: TrainConfig,
    adam: Adam,
    ema: EmaState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    steps: usize,
}

impl Trainer {
    pub fn new(net: UkanDenoiser, schedule: DiffusionSchedule, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if net.timesteps() != schedule.timesteps() {
            return Err(Error::Incompatible(format!(
                "model expects {} timesteps, schedule has {}",
                net.timesteps(),
                schedule.timesteps()
            )));
        }
        let adam = Adam::new(config.adam(), net.store());
        let ema = EmaState::new(net.store(), config.ema_rate)?;
        Ok(Trainer {
            net,
            schedule,
            config,
            adam,
            ema,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            steps: 0,
        })
    }

    pub fn net(&self) -> &UkanDenoiser {
        &self.net
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Copy of the model carrying the EMA weights.
    pub fn ema_model(&self) -> Result<UkanDenoiser> {
        let mut net = self.net.clone();
        self.ema.copy_to(net.store_mut())?;
        Ok(net)
    }

    /// Next batch indices; the data is reshuffled at each epoch boundary.
    fn next_batch(&mut self, len: usize) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..len).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One optimizer step. Returns the batch loss.
    pub fn step(&mut self, data: &[TrainingPair]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let idx = self.next_batch(data.len());
        let images: Vec<Tensor> = idx.iter().map(|&i| to_model_space(&data[i].image)).collect();
        let scans = idx
            .iter()
            .map(|&i| data[i].masked_scan())
            .collect::<Result<Vec<_>>>()?;
        let mut tumor = idx
            .iter()
            .map(|&i| tumor_geometry(&data[i].mask))
            .collect::<Result<Vec<_>>>()?;
        if self.config.condition_dropout > 0.0 {
            for g in tumor.iter_mut() {
                if self.rng.random::<f64>() < self.config.condition_dropout {
                    *g = TumorGeometry::default();
                }
            }
        }
        let x0 = Tensor::stack(&images)?;
        let scan = Tensor::stack(&scans)?;

        let (loss, grads, stats) = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, self.net.store(), Mode::Train);
            let loss = diffusion_loss(
                &self.net,
                &ctx,
                &self.schedule,
                self.config.loss,
                &x0,
                &scan,
                &tumor,
                &mut self.rng,
            )?;
            let value = loss.value().item()?;
            let grads = loss.backward()?;
            (value, ctx.param_grads(&grads), ctx.take_stat_updates())
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let store = self.net.store_mut();
        self.adam.step(store, &grads)?;
        store.apply_updates(stats)?;
        self.ema.update(self.net.store())?;
        self.steps += 1;
        Ok(loss)
    }
}
