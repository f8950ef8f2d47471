use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Linear-beta noise schedule. All accessors take a 1-based timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta endpoints must satisfy 0 < start <= end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = alpha_bar.iter().map(|ab| (1.0 - ab).sqrt()).collect();
    let posterior_var = (0..timesteps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
        })
        .collect();
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
        posterior_var,
    })
}

impl DiffusionSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::contract(
                "diffusion",
                format!("timestep {t} outside [1, {}]", self.timesteps()),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `√(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`, with one timestep per entry of axis 0.
pub fn q_sample(schedule: &DiffusionSchedule, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::dim("q_sample", "all", format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let n = x0.shape().first().copied().unwrap_or(1);
    if t.len() != n {
        return Err(Error::dim("q_sample", "axis 0", format!("{} timesteps for batch of {n}", t.len())));
    }
    for &s in t {
        schedule.check(s)?;
    }
    let per = x0.numel() / n.max(1);
    let mut out = x0.clone();
    for (b, &s) in t.iter().enumerate() {
        let (a, sg) = (schedule.alpha_bar(s).sqrt(), schedule.sigma(s));
        let range = b * per..(b + 1) * per;
        for ((o, &x), &e) in out.data_mut()[range.clone()].iter_mut().zip(&x0.data()[range.clone()]).zip(&eps.data()[range]) {
            *o = a * x + sg * e;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_alpha_bar() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bars(), &[0.7]);
        assert_eq!(s.sigmas().len(), 1);
        assert!((s.sigma(1) - 0.3f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn invalid_endpoints() {
        assert!(matches!(make_schedule(10, 0.0, 0.1), Err(Error::Config(_))));
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_fn(vec![2, 3], |i| i as f64 - 1.0);
        let out = q_sample(&s, &x0, &[500, 1], &Tensor::zeros(vec![2, 3])).unwrap();
        for i in 0..3 {
            assert_eq!(out.data()[i], s.alpha_bar(500).sqrt() * x0.data()[i]);
            assert_eq!(out.data()[3 + i], s.alpha_bar(1).sqrt() * x0.data()[3 + i]);
        }
        assert!(matches!(
            q_sample(&s, &x0, &[0, 1], &Tensor::zeros(vec![2, 3])),
            Err(Error::Contract { .. })
        ));
    }
}
