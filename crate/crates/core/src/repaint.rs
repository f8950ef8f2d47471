//! Masked inpainting: only the masked region is generated, everything else
//! is overwritten from the original at every reverse step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    chain_rng, encode_condition, masked_model_scan, p_sample_step_with, q_sample, sample_with, to_data_space, to_model_space, DiffusionSchedule,
    SamplerConfig,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ukan::{Denoiser, TumorGeometry};

/// RNG stream for the noise applied to the known region.
pub const KNOWN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintConfig {
    /// Passes per reverse step; 1 disables resampling.
    pub resample_jumps: usize,
    /// Paste the clean original into the known region at every step instead
    /// of a sample of the forward process at `t − 1`.
    pub noise_free_replacement: bool,
    /// See [`SamplerConfig::clip_denoised`].
    pub clip_denoised: bool,
}

impl InpaintConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            clip_denoised: self.clip_denoised,
        }
    }
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            resample_jumps: 1,
            noise_free_replacement: false,
            clip_denoised: true,
        }
    }
}

/// An image, the region to regenerate and the geometry used to condition.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintTask {
    /// `[N,1,H,W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[N,1,H,W]` binary, 1 where pixels are generated.
    pub mask: Tensor,
    /// One entry per sample.
    pub tumor: Vec<TumorGeometry>,
}

impl InpaintTask {
    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Config(format!("inpaint image must be [N,1,H,W], got {shape:?}")));
        }
        if self.mask.shape() != shape {
            return Err(Error::Config(format!("mask {:?} vs image {shape:?}", self.mask.shape())));
        }
        if self.tumor.len() != shape[0] {
            return Err(Error::Config(format!("{} geometries for {} images", self.tumor.len(), shape[0])));
        }
        if self.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Validation("inpainting mask must be binary".into()));
        }
        if !self.image.is_finite() {
            return Err(Error::Validation("inpainting image is not finite".into()));
        }
        Ok(())
    }

    /// `(1 − mask) ⊙ (2·image − 1)`, the scan the denoiser is conditioned on.
    pub fn masked_scan(&self) -> Result<Tensor> {
        masked_model_scan(&self.image, &self.mask)
    }
}

/// `mask ? generated : known`, selecting bits rather than blending.
fn select(mask: &Tensor, generated: &Tensor, known: &Tensor) -> Result<Tensor> {
    let mut out = generated.clone();
    for ((o, &m), &k) in out.data_mut().iter_mut().zip(mask.data()).zip(known.data()) {
        if m == 0.0 {
            *o = k;
        }
    }
    if out.shape() != known.shape() {
        return Err(Error::dim("inpaint", "all", "known region shape mismatch"));
    }
    Ok(out)
}

/// Reverse chain with known-region replacement. The chain uses stream 0 of
/// `seed`, the known-region noise stream 1. Known pixels of the result are
/// copied from `task.image`.
pub fn inpaint<N: Denoiser + ?Sized>(
    net: &N,
    schedule: &DiffusionSchedule,
    task: &InpaintTask,
    cfg: &InpaintConfig,
    seed: u64,
) -> Result<Tensor> {
    task.validate()?;
    if cfg.resample_jumps == 0 {
        return Err(Error::Config("resample_jumps must be at least 1".into()));
    }
    let mut chain = chain_rng(seed);
    let mut known_rng = ChaCha8Rng::seed_from_u64(seed);
    known_rng.set_stream(KNOWN_STREAM);

    let shape = task.image.shape().to_vec();
    let n = shape[0];
    let scan = task.masked_scan()?;
    let image = to_model_space(&task.image);
    let sampler = cfg.sampler();
    let cond = encode_condition(net, &scan, &task.tumor)?;
    let mut x = Tensor::randn(shape.clone(), &mut chain);
    for t in (1..=schedule.timesteps()).rev() {
        for pass in 0..cfg.resample_jumps {
            let known = if t == 1 || cfg.noise_free_replacement {
                image.clone()
            } else {
                let eps = Tensor::randn(shape.clone(), &mut known_rng);
                q_sample(schedule, &image, &vec![t - 1; n], &eps)?
            };
            let generated = p_sample_step_with(net, schedule, &x, t, &scan, &cond, &sampler, &mut chain)?;
            let prev = select(&task.mask, &generated, &known)?;
            if pass + 1 < cfg.resample_jumps {
                // Forward one step back to x_t and repeat.
                let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
                let z = Tensor::randn(shape.clone(), &mut chain);
                x = prev.zip_map(&z, |p, z| a * p + b * z)?;
            } else {
                x = prev;
            }
        }
    }
    select(&task.mask, &to_data_space(&x), &task.image)
}

/// Generate with the plain sampler, then paste the known region back.
pub fn generate_then_paste<N: Denoiser + ?Sized>(
    net: &N,
    schedule: &DiffusionSchedule,
    task: &InpaintTask,
    cfg: &InpaintConfig,
    seed: u64,
) -> Result<Tensor> {
    task.validate()?;
    let scan = task.masked_scan()?;
    let generated = sample_with(net, schedule, &scan, &task.tumor, &cfg.sampler(), seed)?;
    select(&task.mask, &generated, &task.image)
}

fn plane_dims(t: &Tensor) -> Option<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return None;
    }
    Some((s[s.len() - 2], s[s.len() - 1]))
}

/// Mean absolute intensity step across 4-neighbour pairs that straddle the
/// mask boundary. Accepts `[H,W]` or any shape with unit leading axes.
pub fn boundary_smoothness(image: &Tensor, mask: &Tensor) -> Result<f64> {
    let (Some((h, w)), Some(dims)) = (plane_dims(image), plane_dims(mask)) else {
        return Err(Error::dim("boundary_smoothness", "leading", "expected a single 2-D plane"));
    };
    if dims != (h, w) {
        return Err(Error::dim("boundary_smoothness", "H,W", format!("image {:?} vs mask {:?}", (h, w), dims)));
    }
    let (img, m) = (image.data(), mask.data());
    if m.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("boundary mask must be binary".into()));
    }
    let (mut total, mut pairs) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)].into_iter().flatten() {
                if m[p] != m[q] {
                    total += (img[p] - img[q]).abs();
                    pairs += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::contract("boundary_smoothness", "mask has no boundary"));
    }
    Ok(total / pairs as f64)
}
