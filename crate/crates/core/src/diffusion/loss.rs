use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Ctx, Tensor, Var};
use crate::ukan::{Denoiser, TumorGeometry};

/// What the network is trained to predict.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// The injected noise `eps`.
    #[default]
    Epsilon,
    /// `(x_t − x0) / σ_t`.
    Paper,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// Mean of squared residuals.
    #[default]
    Squared,
    /// Mean over the batch of the per-sample Euclidean norm of the residual.
    L2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub target: TargetMode,
    pub norm: LossNorm,
}

/// Regression target for each sample of the batch.
pub fn regression_target(
    schedule: &DiffusionSchedule,
    mode: TargetMode,
    x0: &Tensor,
    x_t: &Tensor,
    eps: &Tensor,
    t: &[usize],
) -> Result<Tensor> {
    match mode {
        TargetMode::Epsilon => Ok(eps.clone()),
        TargetMode::Paper => {
            let n = t.len();
            let per = x0.numel() / n.max(1);
            let mut out = x_t.zip_map(x0, |a, b| a - b)?;
            for (b, &s) in t.iter().enumerate() {
                schedule.check(s)?;
                let sg = schedule.sigma(s);
                out.data_mut()[b * per..(b + 1) * per].iter_mut().for_each(|v| *v /= sg);
            }
            Ok(out)
        }
    }
}

/// Reduce `prediction − target` to a scalar loss.
pub fn reduce_residual<'t>(norm: LossNorm, residual: Var<'t>) -> Result<Var<'t>> {
    match norm {
        LossNorm::Squared => residual.square()?.mean(),
        LossNorm::L2 => {
            let shape = residual.shape();
            let n = shape[0];
            let per = residual.value().numel() / n.max(1);
            // The tiny offset keeps the square root differentiable at zero.
            residual
                .reshape(&[n, per])?
                .square()?
                .sum_last()?
                .add_scalar(1e-30)?
                .sqrt()?
                .mean()
        }
    }
}

/// Diffusion loss for given timesteps and noise.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_with<'t, N: Denoiser + ?Sized>(
    net: &N,
    ctx: &Ctx<'t>,
    schedule: &DiffusionSchedule,
    cfg: LossConfig,
    x0: &Tensor,
    masked_scan: &Tensor,
    tumor: &[TumorGeometry],
    t: &[usize],
    eps: &Tensor,
) -> Result<Var<'t>> {
    if x0.shape() != masked_scan.shape() {
        return Err(Error::dim(
            "diffusion_loss",
            "all",
            format!("x0 {:?} vs masked scan {:?}", x0.shape(), masked_scan.shape()),
        ));
    }
    let x_t = q_sample(schedule, x0, t, eps)?;
    let target = regression_target(schedule, cfg.target, x0, &x_t, eps, t)?;
    let scan = ctx.constant(masked_scan.clone());
    let cond = net.condition(ctx, scan, tumor)?;
    let prediction = net.predict(ctx, ctx.constant(x_t), scan, t, &cond)?;
    reduce_residual(cfg.norm, prediction.sub(ctx.constant(target))?)
}

/// Diffusion loss with `t ~ U{1..T}` per sample and `eps ~ N(0, I)`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<'t, N: Denoiser + ?Sized, R: Rng + ?Sized>(
    net: &N,
    ctx: &Ctx<'t>,
    schedule: &DiffusionSchedule,
    cfg: LossConfig,
    x0: &Tensor,
    masked_scan: &Tensor,
    tumor: &[TumorGeometry],
    rng: &mut R,
) -> Result<Var<'t>> {
    let n = x0.shape().first().copied().unwrap_or(1);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.timesteps())).collect();
    let eps = Tensor::randn(x0.shape().to_vec(), rng);
    diffusion_loss_with(net, ctx, schedule, cfg, x0, masked_scan, tumor, &t, &eps)
}
