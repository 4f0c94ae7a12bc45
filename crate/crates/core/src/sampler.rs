//! Reverse-process inference: DDPM ancestral and DDIM samplers wrapped in the
//! two-condition generation pipeline (image prompt + blueprint -> image).
//!
//! Conditioning is timestep-independent, so `generate` encodes the prompt and
//! the blueprint exactly once and reuses both across all steps.

use crate::error::{Error, Result};
use crate::model::{blueprint_features, predict_eps, prompt_context, DualCondModel};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::Rng;
use crate::prompt_encoder::{null_context, PromptContext};
use crate::schedule::{posterior_mean_var, NoiseSchedule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMethod {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub method: SampleMethod,
    /// DDIM stochasticity; 0 is fully deterministic, 1 matches the DDPM
    /// posterior variance.
    pub eta: f64,
    /// 1 disables guidance (single conditional evaluation per step).
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 20,
            method: SampleMethod::Ddim,
            eta: 0.0,
            guidance_scale: 1.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if self.steps == 0 || self.steps > schedule_len {
            return Err(Error::config(format!(
                "steps {} must lie in [1, {schedule_len}]",
                self.steps
            )));
        }
        if self.method == SampleMethod::Ddpm && self.steps != schedule_len {
            return Err(Error::config(
                "the ancestral sampler visits every schedule step; use ddim for fewer",
            ));
        }
        if self.eta < 0.0 {
            return Err(Error::config("eta must be >= 0"));
        }
        if self.guidance_scale < 1.0 {
            return Err(Error::config("guidance_scale must be >= 1"));
        }
        Ok(())
    }
}

/// Invert the forward process for the noise estimate: zhat0 from (z_t, eps).
fn predict_z0<T: Scalar>(
    zt: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    s: &NoiseSchedule,
    clamp: bool,
) -> Result<Tensor<T>> {
    let ab = s.alpha_bar(t);
    let inv = T::from_f64(1.0 / ab.sqrt());
    let coef = T::from_f64((1.0 - ab).sqrt());
    let mut z0 = zt.zip(eps_hat, |z, e| (z - coef * e) * inv, "predict_z0")?;
    if clamp {
        z0 = z0.map(|v| {
            if v < -T::one() {
                -T::one()
            } else if v > T::one() {
                T::one()
            } else {
                v
            }
        });
    }
    z0.ensure_finite("predict_z0")?;
    Ok(z0)
}

/// One ancestral step z_t -> z_{t-1}: posterior sample around the predicted
/// clean image; at t=0 the degenerate posterior is returned exactly (no
/// noise). `clamp` bounds zhat0 to [-1,1] (pixel mode).
pub fn ddpm_step<T: Scalar>(
    zt: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    s: &NoiseSchedule,
    rng: &mut Rng,
    clamp: bool,
) -> Result<Tensor<T>> {
    let z0 = predict_z0(zt, t, eps_hat, s, clamp)?;
    if t == 0 {
        return Ok(z0);
    }
    let (mean, var) = posterior_mean_var(&z0, zt, t, s)?;
    let std = T::from_f64(var.sqrt());
    let noise = rng.normal_tensor::<T>(mean.shape());
    mean.zip(&noise, |m, n| m + std * n, "ddpm_step")
}

/// One DDIM step from t to t_prev (t_prev = -1 denotes the clean endpoint):
/// z_prev = sqrt(abar_prev) zhat0 + sqrt(1 - abar_prev - sigma^2) eps_hat
///        + sigma * noise,   sigma = eta sqrt((1-abar_prev)/(1-abar_t))
///                                 * sqrt(1 - abar_t/abar_prev).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Scalar>(
    zt: &Tensor<T>,
    t: usize,
    t_prev: isize,
    eps_hat: &Tensor<T>,
    s: &NoiseSchedule,
    eta: f64,
    rng: &mut Rng,
    clamp: bool,
) -> Result<Tensor<T>> {
    if t_prev >= t as isize {
        return Err(Error::contract(format!(
            "ddim_step requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if t_prev < -1 {
        return Err(Error::contract(format!("invalid t_prev {t_prev}")));
    }
    let ab_t = s.alpha_bar(t);
    let ab_prev = if t_prev < 0 {
        1.0
    } else {
        s.alpha_bar(t_prev as usize)
    };
    let z0 = predict_z0(zt, t, eps_hat, s, clamp)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let dir_coef = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let a = T::from_f64(ab_prev.sqrt());
    let d = T::from_f64(dir_coef);
    let mut out = z0.zip(eps_hat, |z, e| a * z + d * e, "ddim_step")?;
    if sigma > 0.0 {
        let sg = T::from_f64(sigma);
        let noise = rng.normal_tensor::<T>(out.shape());
        out = out.zip(&noise, |o, n| o + sg * n, "ddim noise")?;
    }
    out.ensure_finite("ddim_step")?;
    Ok(out)
}

/// Evenly spaced descending timestep subsequence including T-1 and (for
/// steps >= 2) ending at 0.
pub fn ddim_timesteps(schedule_len: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![schedule_len - 1];
    }
    let top = (schedule_len - 1) as f64;
    (0..steps)
        .map(|k| (top * (steps - 1 - k) as f64 / (steps - 1) as f64).round() as usize)
        .collect()
}

/// Evaluation counts of one generate call; the conditioning encoders must
/// each run exactly once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenTrace {
    pub prompt_encodes: usize,
    pub blueprint_encodes: usize,
    pub model_evals: usize,
}

/// Full pipeline with instrumentation: encode both conditions once, iterate
/// the sampler from pure noise, map back to an image in [0,1].
pub fn generate_traced<T: Scalar>(
    model: &DualCondModel<T>,
    prompt_image: &Tensor<T>,
    blueprint: &Tensor<T>,
    cfg: &SampleConfig,
) -> Result<(Tensor<T>, GenTrace)> {
    let schedule = model.schedule()?;
    cfg.validate(schedule.len())?;
    let mut trace = GenTrace::default();

    let ctx = prompt_context(model, prompt_image)?;
    trace.prompt_encodes += 1;
    let cbp = blueprint_features(model, blueprint)?;
    trace.blueprint_encodes += 1;
    let null_ctx: Option<PromptContext<T>> = if cfg.guidance_scale > 1.0 {
        Some(null_context(&model.params)?)
    } else {
        None
    };

    let clamp = !model.config.latent_mode;
    let size = model.config.diffusion_size();
    let shape = [model.config.diffusion_channels(), size, size];
    let mut rng = Rng::new(cfg.seed);
    let mut z = rng.normal_tensor::<T>(&shape);

    let mut eval = |z: &Tensor<T>, t: usize, trace: &mut GenTrace| -> Result<Tensor<T>> {
        let cond = predict_eps(model, z, t, &ctx, &cbp)?;
        trace.model_evals += 1;
        match &null_ctx {
            Some(nc) => {
                let unc = predict_eps(model, z, t, nc, &cbp)?;
                trace.model_evals += 1;
                let g = T::from_f64(cfg.guidance_scale);
                cond.zip(&unc, |c, u| u + g * (c - u), "guidance mix")
            }
            None => Ok(cond),
        }
    };

    match cfg.method {
        SampleMethod::Ddpm => {
            for t in (0..schedule.len()).rev() {
                let eps_hat = eval(&z, t, &mut trace)?;
                z = ddpm_step(&z, t, &eps_hat, &schedule, &mut rng, clamp)?;
            }
        }
        SampleMethod::Ddim => {
            let ts = ddim_timesteps(schedule.len(), cfg.steps);
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = if i + 1 < ts.len() {
                    ts[i + 1] as isize
                } else {
                    -1
                };
                let eps_hat = eval(&z, t, &mut trace)?;
                z = ddim_step(&z, t, t_prev, &eps_hat, &schedule, cfg.eta, &mut rng, clamp)?;
            }
        }
    }

    let image = model.from_diffusion_space(&z)?;
    Ok((image, trace))
}

/// Generate an image from the two conditions.
pub fn generate<T: Scalar>(
    model: &DualCondModel<T>,
    prompt_image: &Tensor<T>,
    blueprint: &Tensor<T>,
    cfg: &SampleConfig,
) -> Result<Tensor<T>> {
    generate_traced(model, prompt_image, blueprint, cfg).map(|(img, _)| img)
}

/// Reproducibility sidecar written next to sampled images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub config: SampleConfig,
    pub checkpoint_sha256: String,
    pub prompt: String,
    pub blueprint: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn ddpm_final_step_is_posterior_mean() {
        let s = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let mut rng = Rng::new(1);
        let zt = rng.normal_tensor::<f64>(&[4]);
        let eps = rng.normal_tensor::<f64>(&[4]);
        let before = rng.clone();
        let out = ddpm_step(&zt, 0, &eps, &s, &mut rng, false).unwrap();
        // no rng consumption at t = 0 and the output inverts q exactly
        assert_eq!(rng.next_u64(), before.clone().next_u64());
        let ab = s.alpha_bar(0);
        for i in 0..4 {
            let expect = (zt.data()[i] - (1.0 - ab).sqrt() * eps.data()[i]) / ab.sqrt();
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_eps_recovers_z0() {
        let s = make_linear_schedule(50, 1e-3, 0.1).unwrap();
        let mut rng = Rng::new(2);
        for t in [0usize, 10, 49] {
            let z0 = rng.uniform_range(-0.9, 0.9);
            let e = rng.normal();
            let ab = s.alpha_bar(t);
            let zt = Tensor::scalar(ab.sqrt() * z0 + (1.0 - ab).sqrt() * e);
            let eps = Tensor::scalar(e);
            let rec = predict_z0(&zt, t, &eps, &s, false).unwrap();
            assert!((rec.data()[0] - z0).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn ddim_contract_errors() {
        let s = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let z = Tensor::scalar(0.5f64);
        let mut rng = Rng::new(3);
        assert!(matches!(
            ddim_step(&z, 3, 5, &z, &s, 0.0, &mut rng, false),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            ddim_step(&z, 3, -2, &z, &s, 0.0, &mut rng, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ddim_deterministic_at_eta_zero() {
        let s = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let mut rng_a = Rng::new(4);
        let mut rng_b = Rng::new(5); // different stream must not matter
        let zt = Tensor::scalar(1.3f64);
        let eps = Tensor::scalar(-0.4f64);
        let a = ddim_step(&zt, 5, 4, &eps, &s, 0.0, &mut rng_a, false).unwrap();
        let b = ddim_step(&zt, 5, 4, &eps, &s, 0.0, &mut rng_b, false).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ddim_full_sequence_follows_noise_free_trajectory() {
        // a perfect denoiser for a fixed clean value: starting on the
        // noise-free manifold, both samplers must stay on it exactly
        let t_total = 40;
        let s = make_linear_schedule(t_total, 1e-3, 0.15).unwrap();
        let z0_true = 0.62f64;
        let perfect_eps = |z: f64, t: usize| -> f64 {
            let ab = s.alpha_bar(t);
            (z - ab.sqrt() * z0_true) / (1.0 - ab).sqrt()
        };
        let mut rng = Rng::new(6);
        // DDIM eta=0 over the full sequence
        let mut z_ddim = s.alpha_bar(t_total - 1).sqrt() * z0_true;
        for t in (0..t_total).rev() {
            let e = Tensor::scalar(perfect_eps(z_ddim, t));
            let zt = Tensor::scalar(z_ddim);
            let t_prev = t as isize - 1;
            z_ddim = ddim_step(&zt, t, t_prev, &e, &s, 0.0, &mut rng, false)
                .unwrap()
                .data()[0];
        }
        // DDPM posterior-mean trajectory (no noise injected)
        let mut z_ddpm = s.alpha_bar(t_total - 1).sqrt() * z0_true;
        for t in (0..t_total).rev() {
            let e = Tensor::scalar(perfect_eps(z_ddpm, t));
            let zt = Tensor::scalar(z_ddpm);
            let z0 = predict_z0(&zt, t, &e, &s, false).unwrap();
            z_ddpm = if t == 0 {
                z0.data()[0]
            } else {
                posterior_mean_var(&z0, &zt, t, &s).unwrap().0.data()[0]
            };
        }
        assert!(
            (z_ddim - z_ddpm).abs() < 1e-5,
            "ddim {z_ddim} vs ddpm mean {z_ddpm}"
        );
        assert!((z_ddim - z0_true).abs() < 1e-5);
    }

    #[test]
    fn ddim_eta_one_matches_ddpm_variance() {
        // scalar case: over many draws the eta=1 DDIM step must reproduce the
        // ancestral posterior variance
        let s = make_linear_schedule(20, 1e-2, 0.2).unwrap();
        let t = 10usize;
        let zt = Tensor::scalar(0.7f64);
        let eps = Tensor::scalar(0.3f64);
        let mut rng = Rng::new(7);
        let draws = 100_000;
        let (mut sum_a, mut sq_a, mut sum_b, mut sq_b) = (0.0f64, 0.0, 0.0, 0.0);
        for _ in 0..draws {
            let a = ddim_step(&zt, t, t as isize - 1, &eps, &s, 1.0, &mut rng, false)
                .unwrap()
                .data()[0];
            let b = ddpm_step(&zt, t, &eps, &s, &mut rng, false).unwrap().data()[0];
            sum_a += a;
            sq_a += a * a;
            sum_b += b;
            sq_b += b * b;
        }
        let var_a = sq_a / draws as f64 - (sum_a / draws as f64).powi(2);
        let var_b = sq_b / draws as f64 - (sum_b / draws as f64).powi(2);
        let mean_a = sum_a / draws as f64;
        let mean_b = sum_b / draws as f64;
        assert!(
            (var_a - var_b).abs() / var_b < 0.03,
            "var {var_a} vs {var_b}"
        );
        assert!((mean_a - mean_b).abs() < 3.0 * (var_b / draws as f64).sqrt() * 2.0);
    }

    #[test]
    fn timestep_subsequence_contract() {
        let ts = ddim_timesteps(200, 20);
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 199);
        assert_eq!(*ts.last().unwrap(), 0);
        for w in ts.windows(2) {
            assert!(w[0] > w[1], "not strictly decreasing: {ts:?}");
        }
        let full = ddim_timesteps(10, 10);
        assert_eq!(full, vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(ddim_timesteps(10, 1), vec![9]);
    }

    #[test]
    fn generate_contracts_on_untrained_model() {
        let cfg_model = ModelConfig::tiny();
        let model = DualCondModel::<f32>::init(cfg_model.clone(), 21).unwrap();
        let mut rng = Rng::new(22);
        let r = cfg_model.resolution;
        let prompt = rng.uniform_tensor::<f32>(&[3, r, r], 0.0, 1.0);
        let blueprint = Tensor::from_fn(&[1, r, r], |i| ((i % 4) == 0) as u8 as f32);
        let cfg = SampleConfig {
            steps: 5,
            method: SampleMethod::Ddim,
            eta: 0.0,
            guidance_scale: 1.0,
            seed: 9,
        };
        // untrained model is permitted; output must be valid and reproducible
        let (img_a, trace) = generate_traced(&model, &prompt, &blueprint, &cfg).unwrap();
        assert_eq!(trace.prompt_encodes, 1);
        assert_eq!(trace.blueprint_encodes, 1);
        assert_eq!(trace.model_evals, cfg.steps);
        let (img_b, _) = generate_traced(&model, &prompt, &blueprint, &cfg).unwrap();
        assert_eq!(img_a.data(), img_b.data(), "fixed seed must reproduce");
        assert!(img_a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        // guidance > 1 doubles the evaluations
        let g = SampleConfig {
            guidance_scale: 2.0,
            ..cfg.clone()
        };
        let (_, trace_g) = generate_traced(&model, &prompt, &blueprint, &g).unwrap();
        assert_eq!(trace_g.model_evals, 2 * cfg.steps);

        // parameters are untouched by sampling
        let before = crate::checkpoint::to_bytes(&model, 0).unwrap();
        let _ = generate_traced(&model, &prompt, &blueprint, &cfg).unwrap();
        let after = crate::checkpoint::to_bytes(&model, 0).unwrap();
        assert_eq!(before, after);

        // resolution mismatch is a shape error
        let bad = Tensor::<f32>::zeros(&[1, r * 2, r * 2]);
        assert!(matches!(
            generate(&model, &prompt, &bad, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ddpm_requires_full_schedule() {
        let cfg = SampleConfig {
            steps: 5,
            method: SampleMethod::Ddpm,
            eta: 0.0,
            guidance_scale: 1.0,
            seed: 1,
        };
        assert!(cfg.validate(10).is_err());
        let full = SampleConfig { steps: 10, ..cfg };
        assert!(full.validate(10).is_ok());
    }
}
