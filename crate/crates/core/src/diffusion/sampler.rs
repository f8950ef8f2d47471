use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Ctx, Mode, Tape, Tensor};
use crate::ukan::{ConditionValue, Denoiser, TumorGeometry};

/// RNG stream used by the reverse chain for a given seed.
pub const CHAIN_STREAM: u64 = 0;

pub fn chain_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(CHAIN_STREAM);
    rng
}

/// Intensities in `[0, 1]` to the `[-1, 1]` range the chain runs in.
/// `(1 − mask) ⊙ (2·image − 1)`: known pixels in model space, the hole at 0.
pub fn masked_model_scan(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    image.zip_map(mask, |v, m| if m == 0.0 { 2.0 * v - 1.0 } else { 0.0 })
}

pub fn to_model_space(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// Chain values back to intensities, clamped to `[0, 1]`.
pub fn to_data_space(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Clamp the implied `x0` estimate to `[-1, 1]` and step with the
    /// posterior mean of that estimate.
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { clip_denoised: true }
    }
}

/// Encode the conditioning inputs once, in evaluation mode.
pub fn encode_condition<N: Denoiser + ?Sized>(
    net: &N,
    masked_scan: &Tensor,
    tumor: &[TumorGeometry],
) -> Result<ConditionValue> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, net.store(), Mode::Eval);
    Ok(net.condition(&ctx, ctx.constant(masked_scan.clone()), tumor)?.detach())
}

/// Network output at timestep `t` for every sample, in evaluation mode.
pub fn predict_noise<N: Denoiser + ?Sized>(
    net: &N,
    x_t: &Tensor,
    t: usize,
    masked_scan: &Tensor,
    cond: &ConditionValue,
) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, net.store(), Mode::Eval);
    let n = x_t.shape().first().copied().unwrap_or(1);
    let c = cond.attach(&ctx);
    let out = net.predict(
        &ctx,
        ctx.constant(x_t.clone()),
        ctx.constant(masked_scan.clone()),
        &vec![t; n],
        &c,
    )?;
    Ok((*out.value()).clone())
}

/// One ancestral step `x_t -> x_{t-1}` using the unclipped mean. The
/// prediction is used directly as the noise estimate; no noise is added at
/// `t = 1`.
pub fn p_sample_step<N: Denoiser + ?Sized, R: Rng + ?Sized>(
    net: &N,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    masked_scan: &Tensor,
    cond: &ConditionValue,
    rng: &mut R,
) -> Result<Tensor> {
    let cfg = SamplerConfig { clip_denoised: false };
    p_sample_step_with(net, schedule, x_t, t, masked_scan, cond, &cfg, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn p_sample_step_with<N: Denoiser + ?Sized, R: Rng + ?Sized>(
    net: &N,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    masked_scan: &Tensor,
    cond: &ConditionValue,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    schedule.check(t)?;
    let eps_hat = predict_noise(net, x_t, t, masked_scan, cond)?;
    let noise = if t > 1 {
        Some(Tensor::randn(x_t.shape().to_vec(), rng))
    } else {
        None
    };
    if cfg.clip_denoised {
        posterior_step_clipped(schedule, x_t, t, &eps_hat, noise.as_ref())
    } else {
        posterior_step(schedule, x_t, t, &eps_hat, noise.as_ref())
    }
}

fn check_step(schedule: &DiffusionSchedule, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<()> {
    schedule.check(t)?;
    if eps_hat.shape() != x_t.shape() {
        return Err(Error::dim(
            "p_sample_step",
            "all",
            format!("prediction {:?} vs x_t {:?}", eps_hat.shape(), x_t.shape()),
        ));
    }
    Ok(())
}

fn add_noise(schedule: &DiffusionSchedule, t: usize, mean: Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
    match noise {
        Some(z) => {
            let std = schedule.posterior_var(t).sqrt();
            mean.zip_map(z, |m, z| m + std * z)
        }
        None => Ok(mean),
    }
}

/// `(x_t − β_t/σ_t·eps_hat)/√α_t + √β̃_t·z`.
pub fn posterior_step(
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    check_step(schedule, x_t, t, eps_hat)?;
    let coef = schedule.beta(t) / schedule.sigma(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let mean = x_t.zip_map(eps_hat, |x, e| (x - coef * e) * inv_sqrt_alpha)?;
    add_noise(schedule, t, mean, noise)
}

/// Posterior mean of `q(x_{t-1} | x_t, x0)` at `x0 = clamp((x_t − σ_t·eps_hat)/√ᾱ_t, −1, 1)`,
/// plus `√β̃_t·z`. Agrees with [`posterior_step`] whenever no clamping occurs.
pub fn posterior_step_clipped(
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    check_step(schedule, x_t, t, eps_hat)?;
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let (sqrt_ab, sg) = (ab.sqrt(), schedule.sigma(t));
    let c0 = ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = x_t.zip_map(eps_hat, |x, e| {
        let x0 = ((x - sg * e) / sqrt_ab).clamp(-1.0, 1.0);
        c0 * x0 + ct * x
    })?;
    add_noise(schedule, t, mean, noise)
}

/// Full reverse chain from `x_T ~ N(0, I)`, returned as intensities in `[0, 1]`.
pub fn sample<N: Denoiser + ?Sized>(
    net: &N,
    schedule: &DiffusionSchedule,
    masked_scan: &Tensor,
    tumor: &[TumorGeometry],
    seed: u64,
) -> Result<Tensor> {
    sample_with(net, schedule, masked_scan, tumor, &SamplerConfig::default(), seed)
}

pub fn sample_with<N: Denoiser + ?Sized>(
    net: &N,
    schedule: &DiffusionSchedule,
    masked_scan: &Tensor,
    tumor: &[TumorGeometry],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = chain_rng(seed);
    let cond = encode_condition(net, masked_scan, tumor)?;
    let mut x = Tensor::randn(masked_scan.shape().to_vec(), &mut rng);
    for t in (1..=schedule.timesteps()).rev() {
        x = p_sample_step_with(net, schedule, &x, t, masked_scan, &cond, cfg, &mut rng)?;
    }
    Ok(to_data_space(&x))
}
