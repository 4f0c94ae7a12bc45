//! Joint training of the prompt encoder, blueprint encoder, and denoiser
//! under the epsilon-prediction loss, with AdamW and warmup-then-constant
//! learning rate. Runs are bit-reproducible from the config seed: every
//! random draw happens serially up front, and the parallel per-sample
//! gradients are reduced in batch order.

use crate::config::ModelConfig;
use crate::data::{Dataset, TrainingPair};
use crate::error::{Error, Result};
use crate::model::{diffusion_loss_on, prepare_blueprint, DualCondModel, LossInputs};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{NamedTensors, Rng, Tape};
use crate::params::ParamStore;
use crate::schedule::{q_sample, NoiseSchedule};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_target: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Probability of replacing the prompt context with the learned null
    /// context, enabling optional classifier-free guidance at sampling.
    pub cond_dropout_p: f64,
    pub seed: u64,
    pub resolution: usize,
    pub latent_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr_target: 1e-4,
            warmup_steps: 500,
            total_steps: 15_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            cond_dropout_p: 0.1,
            seed: 1234,
            resolution: 32,
            latent_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::config("batch size and total steps must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps must not exceed total_steps"));
        }
        if !(self.lr_target > 0.0) {
            return Err(Error::config("lr_target must be positive"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(Error::config("cond_dropout_p must lie in [0, 1)"));
        }
        if self.resolution != model.resolution || self.latent_mode != model.latent_mode {
            return Err(Error::config(
                "train config resolution/latent_mode disagree with the model config",
            ));
        }
        Ok(())
    }
}

/// Linear warmup to the target, then constant.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.warmup_steps {
        cfg.lr_target
    } else {
        cfg.lr_target * step as f64 / cfg.warmup_steps as f64
    }
}

/// First/second moment estimates per parameter, plus the shared step count.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    pub step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            moments: BTreeMap::new(),
            step: 0,
        }
    }
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One AdamW update over the named parameters present in `grads`:
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected m_hat/v_hat;
/// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd * theta).
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &NamedTensors<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr_t: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::from_f64(lr_t);
    let eps = T::from_f64(cfg.eps);
    let wd = T::from_f64(cfg.weight_decay);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pd[i] = pd[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
        }
    }
    Ok(())
}

/// Assemble the loss-graph inputs for one pair at one timestep.
fn loss_inputs<T: Scalar>(
    model: &DualCondModel<T>,
    pair: &TrainingPair,
    t: usize,
    eps: Tensor<T>,
    drop_prompt: bool,
    schedule: &NoiseSchedule,
) -> Result<LossInputs<T>> {
    let z0 = model.to_diffusion_space(&pair.target.cast::<T>())?;
    let zt = q_sample(&z0, t, &eps, schedule)?;
    let blueprint_up = prepare_blueprint(&pair.blueprint.cast::<T>(), &model.config)?;
    Ok(LossInputs {
        zt,
        t,
        eps,
        prompt: (!drop_prompt).then(|| pair.prompt.cast::<T>()),
        blueprint_up,
    })
}

/// Epsilon-prediction loss of one pair at one timestep with the given noise
/// draw; `rng` decides prompt dropout.
pub fn diffusion_loss<T: Scalar>(
    model: &DualCondModel<T>,
    pair: &TrainingPair,
    t: usize,
    eps: &Tensor<T>,
    cond_dropout_p: f64,
    rng: &mut Rng,
) -> Result<T> {
    let schedule = model.schedule()?;
    let drop = rng.uniform() < cond_dropout_p;
    let inputs = loss_inputs(model, pair, t, eps.clone(), drop, &schedule)?;
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape);
    let loss = diffusion_loss_on(&mut tape, &vars, &model.config, &inputs)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Mean loss over the last few hundred steps; the learnability metric.
    pub tail_mean_loss: f64,
    pub min_loss: f64,
    #[serde(skip)]
    pub losses: Vec<f32>,
}

pub struct TrainOutputs {
    /// Where metrics.csv and checkpoints go; nothing is written when None.
    pub out_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainOutputs {
    fn default() -> Self {
        TrainOutputs {
            out_dir: None,
            checkpoint_every: 1000,
        }
    }
}

struct SampleDraw<T> {
    pair_idx: usize,
    t: usize,
    drop_prompt: bool,
    eps: Tensor<T>,
}

/// Train the three conditioning submodules jointly. Deterministic in
/// `cfg.seed`: batch order, timestep draws, noise draws, and dropout coins
/// come from one serial stream; parallel gradient evaluation cannot reorder
/// anything because the reduction is in batch order.
pub fn train<T: Scalar>(
    model: &mut DualCondModel<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate(&model.config)?;
    if dataset.is_empty() {
        return Err(Error::config("dataset has no training pairs"));
    }
    if dataset.config.resolution != model.config.resolution {
        return Err(Error::config(format!(
            "dataset resolution {} does not match model resolution {}",
            dataset.config.resolution, model.config.resolution
        )));
    }
    let schedule = model.schedule()?;
    let trainable: Vec<String> = model.trainable_names();
    let mut opt = OptimizerState::<T>::new();
    let mut rng = Rng::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.total_steps);

    let mut metrics = match &outputs.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "step,loss,lr")?;
            Some(f)
        }
        None => None,
    };

    let shape = [
        model.config.diffusion_channels(),
        model.config.diffusion_size(),
        model.config.diffusion_size(),
    ];

    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg);
        // serial draws keep the stream identical regardless of worker count
        let draws: Vec<SampleDraw<T>> = (0..cfg.batch_size)
            .map(|_| SampleDraw {
                pair_idx: rng.below(dataset.len()),
                t: rng.below(schedule.len()),
                drop_prompt: rng.uniform() < cfg.cond_dropout_p,
                eps: rng.normal_tensor(&shape),
            })
            .collect();
        let batch_indices: Vec<usize> = draws.iter().map(|d| d.pair_idx).collect();

        let per_sample: Vec<Result<(T, NamedTensors<T>)>> = draws
            .into_par_iter()
            .map(|draw| {
                let pair = dataset.pair(draw.pair_idx)?;
                let inputs =
                    loss_inputs(model, &pair, draw.t, draw.eps, draw.drop_prompt, &schedule)?;
                let mut tape = Tape::new();
                let vars = model.params.register(&mut tape);
                let loss = diffusion_loss_on(&mut tape, &vars, &model.config, &inputs)?;
                let loss_value = tape.value(loss).data()[0];
                tape.backward(loss)?;
                let mut grads = NamedTensors::new();
                for name in &trainable {
                    if let Some(g) = tape.grad(vars.get(name)?) {
                        grads.insert(
                            name.clone(),
                            Tensor::new(model.params.get(name)?.shape().to_vec(), g.to_vec())?,
                        );
                    }
                }
                Ok((loss_value, grads))
            })
            .collect();

        // ordered reduction: mean loss and mean gradients
        let mut mean_grads: NamedTensors<T> = NamedTensors::new();
        let mut loss_acc = 0.0f64;
        let inv_batch = T::from_f64(1.0 / cfg.batch_size as f64);
        for res in per_sample {
            let (loss_value, grads) = res.map_err(|e| Error::Diverged {
                step,
                batch: batch_indices.clone(),
                detail: e.to_string(),
            })?;
            loss_acc += Scalar::to_f64(loss_value);
            for (name, g) in grads {
                match mean_grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b * inv_batch;
                        }
                    }
                    None => {
                        mean_grads.insert(name, g.scale(inv_batch));
                    }
                }
            }
        }
        let loss = loss_acc / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                batch: batch_indices,
                detail: format!("non-finite loss {loss}"),
            });
        }
        losses.push(loss as f32);

        adamw_step(&mut model.params, &mean_grads, &mut opt, cfg, lr)?;

        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{step},{loss},{lr}")?;
        }
        if let Some(dir) = &outputs.out_dir {
            if outputs.checkpoint_every > 0
                && (step + 1) % outputs.checkpoint_every == 0
                && step + 1 < cfg.total_steps
            {
                crate::checkpoint::save(&dir.join(format!("step_{:06}.ckpt", step + 1)), model, step + 1)?;
            }
        }
    }

    if let Some(dir) = &outputs.out_dir {
        crate::checkpoint::save(&dir.join("final.ckpt"), model, cfg.total_steps)?;
    }

    let tail = losses.len().min(500.max(losses.len() / 10));
    let tail_mean = losses[losses.len() - tail..]
        .iter()
        .map(|&v| v as f64)
        .sum::<f64>()
        / tail as f64;
    Ok(TrainReport {
        steps: cfg.total_steps,
        final_loss: *losses.last().unwrap() as f64,
        tail_mean_loss: tail_mean,
        min_loss: losses.iter().fold(f64::INFINITY, |a, &b| a.min(b as f64)),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::DataConfig;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::scalar(v));
        s
    }

    fn grad_map(v: f64) -> NamedTensors<f64> {
        let mut g = NamedTensors::new();
        g.insert("theta".into(), Tensor::scalar(v));
        g
    }

    fn adam_cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr_target: lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_grad_zero_decay_keeps_params() {
        let mut p = scalar_store(1.5);
        let mut st = OptimizerState::new();
        adamw_step(&mut p, &grad_map(0.0), &mut st, &adam_cfg(0.1, 0.0), 0.1).unwrap();
        assert_eq!(p.get("theta").unwrap().data()[0], 1.5);
    }

    #[test]
    fn scalar_hand_value_after_one_step() {
        // theta=1, g=1, lr=0.1, b1=.9, b2=.999, eps=1e-8, wd=0.01:
        // m=0.1, v=0.001, m_hat=1, v_hat=1,
        // theta' = 1 - 0.1*(1/(1+1e-8) + 0.01) = 0.8990000...
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new();
        adamw_step(&mut p, &grad_map(1.0), &mut st, &adam_cfg(0.1, 0.01), 0.1).unwrap();
        let got = p.get("theta").unwrap().data()[0];
        assert!((got - 0.899).abs() < 1e-6, "theta' = {got}");
    }

    #[test]
    fn zero_grad_decay_is_geometric() {
        let lr = 0.05;
        let wd = 0.02;
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new();
        let k = 17;
        for _ in 0..k {
            adamw_step(&mut p, &grad_map(0.0), &mut st, &adam_cfg(lr, wd), lr).unwrap();
        }
        let expect = (1.0 - lr * wd).powi(k);
        let got = p.get("theta").unwrap().data()[0];
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn zero_decay_matches_plain_adam() {
        // independent Adam evaluation on a random tensor sequence
        let mut rng = Rng::new(77);
        let n = 16;
        let mut p = ParamStore::<f64>::new();
        let init = rng.normal_tensor::<f64>(&[n]);
        p.insert("w", init.clone());
        let mut st = OptimizerState::new();
        let cfg = adam_cfg(0.01, 0.0);

        let mut reference = init.data().to_vec();
        let mut m = vec![0.0f64; n];
        let mut v = vec![0.0f64; n];
        for t in 1..=25 {
            let g = rng.normal_tensor::<f64>(&[n]);
            let mut gm = NamedTensors::new();
            gm.insert("w".into(), g.clone());
            adamw_step(&mut p, &gm, &mut st, &cfg, 0.01).unwrap();
            for i in 0..n {
                m[i] = 0.9 * m[i] + 0.1 * g.data()[i];
                v[i] = 0.999 * v[i] + 0.001 * g.data()[i] * g.data()[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                reference[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in p.get("w").unwrap().data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lr_schedule_contract() {
        let cfg = TrainConfig {
            lr_target: 2e-4,
            warmup_steps: 100,
            total_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 2e-4);
        assert_eq!(lr_at(50, &cfg), 1e-4);
        assert_eq!(lr_at(999, &cfg), 2e-4);
        let no_warmup = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(lr_at(0, &no_warmup), 2e-4);
    }

    fn tiny_setup() -> (DualCondModel<f32>, Dataset, TrainConfig) {
        let mut mc = ModelConfig::tiny();
        mc.resolution = 16;
        mc.prompt.patch = 8;
        let model = DualCondModel::<f32>::init(mc, 5).unwrap();
        let ds = Dataset::build(DataConfig {
            identities: 3,
            poses_per_identity: 2,
            resolution: 16,
            seed: 9,
            ..DataConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            lr_target: 1e-3,
            warmup_steps: 2,
            total_steps: 6,
            seed: 42,
            resolution: 16,
            latent_mode: false,
            ..TrainConfig::default()
        };
        (model, ds, cfg)
    }

    #[test]
    fn fresh_model_loss_is_unit_noise_power() {
        // the zero-initialized denoiser predicts exactly zero, so the loss is
        // the mean square of the drawn noise: 1 up to sampling error
        let (model, ds, _) = tiny_setup();
        let schedule = model.schedule().unwrap();
        let mut rng = Rng::new(3);
        let mut acc = 0.0;
        let n = 12;
        for i in 0..n {
            let pair = ds.pair(i % ds.len()).unwrap();
            let eps = rng.normal_tensor::<f32>(&[3, 16, 16]);
            let t = rng.below(schedule.len());
            let loss = diffusion_loss(&model, &pair, t, &eps, 0.0, &mut rng).unwrap();
            acc += loss as f64;
        }
        let mean = acc / n as f64;
        assert!((mean - 1.0).abs() < 0.1, "mean loss {mean}");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        // the fresh model predicts exactly zero, so a zero noise draw is the
        // hard-wired-correct case and the loss vanishes through the real path
        let (model, ds, _) = tiny_setup();
        let pair = ds.pair(0).unwrap();
        let eps = Tensor::<f32>::zeros(&[3, 16, 16]);
        let mut rng = Rng::new(4);
        let loss = diffusion_loss(&model, &pair, 3, &eps, 0.0, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn one_step_updates_all_three_submodules() {
        let (mut model, ds, mut cfg) = tiny_setup();
        cfg.total_steps = 1;
        cfg.warmup_steps = 0;
        cfg.cond_dropout_p = 0.0;
        let before = model.params.clone();
        train(&mut model, &ds, &cfg, &TrainOutputs::default()).unwrap();
        for ns in ["blueprint_encoder.", "prompt_encoder.", "unet."] {
            let changed = model
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(ns))
                .any(|(n, t)| before.get(n).unwrap().data() != t.data());
            assert!(changed, "no parameter changed in {ns}");
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (model0, ds, cfg) = tiny_setup();
        let mut a = model0.clone();
        let mut b = model0;
        train(&mut a, &ds, &cfg, &TrainOutputs::default()).unwrap();
        train(&mut b, &ds, &cfg, &TrainOutputs::default()).unwrap();
        let ba = crate::checkpoint::to_bytes(&a, cfg.total_steps).unwrap();
        let bb = crate::checkpoint::to_bytes(&b, cfg.total_steps).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn poisoned_parameter_aborts_with_diagnostics() {
        let (mut model, ds, cfg) = tiny_setup();
        let w = model.params.get_mut("unet.input_conv.weight").unwrap();
        w.data_mut()[0] = f32::NAN;
        let err = train(&mut model, &ds, &cfg, &TrainOutputs::default()).unwrap_err();
        match err {
            Error::Diverged { step, batch, .. } => {
                assert_eq!(step, 0);
                assert_eq!(batch.len(), cfg.batch_size);
            }
            other => panic!("expected Diverged, got {other}"),
        }
    }
}
