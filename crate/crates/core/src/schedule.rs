//! Forward diffusion process: the beta schedule, cumulative alpha tables,
//! q-sampling, and the closed-form Gaussian posterior the samplers target.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    /// Total diffusion steps T.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // DDPM-standard linear schedule.
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// Compressed schedule for desk runs: fewer steps with the beta range
    /// scaled up so the terminal signal-to-noise ratio matches the 1000-step
    /// default (otherwise sampling would start far from pure noise).
    pub fn desk(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        ScheduleConfig {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: 0.02 * scale,
        }
    }
}

/// Beta/alpha-bar tables for a T-step forward process. Timesteps are
/// 0-indexed internally: `alpha_bars[t]` = prod_{s<=t} (1 - beta_s), so even
/// t = 0 carries one step of noise. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear beta interpolation inclusive of both endpoints.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_linear_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("empty beta table"));
        }
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::config("all betas must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Alpha-bar of the step before t, with the convention alpha_bar(-1) = 1
    /// (no noise before the first step).
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            Err(Error::index(format!(
                "timestep {t} out of range for T={}",
                self.len()
            )))
        } else {
            Ok(())
        }
    }
}

/// Forward noising: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn q_sample<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let ab = s.alpha_bar(t);
    let a = T::from_f64(ab.sqrt());
    let b = T::from_f64((1.0 - ab).sqrt());
    let out = z0.zip(eps, |z, e| a * z + b * e, "q_sample")?;
    out.ensure_finite("q_sample")?;
    Ok(out)
}

/// DDPM posterior q(z_{t-1} | z_t, z0): mean and (scalar) variance.
///
/// mean = sqrt(abar_{t-1}) beta_t / (1-abar_t) * z0
///      + sqrt(alpha_t) (1-abar_{t-1}) / (1-abar_t) * z_t
/// var  = (1-abar_{t-1}) / (1-abar_t) * beta_t
pub fn posterior_mean_var<T: Scalar>(
    z0: &Tensor<T>,
    zt: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<(Tensor<T>, f64)> {
    if t == 0 {
        return Err(Error::contract(
            "posterior is undefined at t=0 (no previous step)",
        ));
    }
    s.check_t(t)?;
    if z0.shape() != zt.shape() {
        return Err(Error::shape(format!(
            "posterior_mean_var: z0 {:?} vs zt {:?}",
            z0.shape(),
            zt.shape()
        )));
    }
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar_prev(t);
    let beta = s.beta(t);
    let alpha = s.alpha(t);
    let c0 = T::from_f64(ab_prev.sqrt() * beta / (1.0 - ab));
    let ct = T::from_f64(alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    let mean = z0.zip(zt, |z, x| c0 * z + ct * x, "posterior mean")?;
    mean.ensure_finite("posterior_mean_var")?;
    let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
    Ok((mean, var))
}
