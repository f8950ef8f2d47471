//! Noise schedule, forward process, training objective, ancestral sampler,
//! weight averaging and the training loop.

mod ema;
mod loss;
mod sampler;
mod schedule;
mod train;

pub use ema::{EmaState, DEFAULT_EMA_RATE};
pub use loss::{diffusion_loss, diffusion_loss_with, reduce_residual, regression_target, LossConfig, LossNorm, TargetMode};
pub use sampler::{
    chain_rng, encode_condition, masked_model_scan, p_sample_step, p_sample_step_with, posterior_step, posterior_step_clipped, predict_noise,
    sample, sample_with, to_data_space, to_model_space, SamplerConfig, CHAIN_STREAM,
};
pub use schedule::{make_schedule, q_sample, DiffusionSchedule, ScheduleConfig};
pub use train::{TrainConfig, Trainer, TrainingPair};
