use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_update, AdamConfig, AdamState};
use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::{cfg_dropout, forward_diffuse, gaussian, ConditionSequence};
use crate::arplan::{generate_ar_steps, ArPlan};
use crate::causal_mask::{build_mask, MaskVariant};
use crate::datagen::Record;
use crate::denoiser::{init_params, DenoiserConfig, DenoiserInput, DenoiserParams, Weights};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, Tape};
use crate::rng::{derive_seed, derived_rng};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

/// Samples per tape. Fixed so that gradient reduction order, and therefore
/// the trained weights, do not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScope {
    /// Every noisy token contributes.
    #[default]
    AllNoisy,
    /// One uniformly chosen AR step contributes.
    CurrentStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gamma: f64,
    pub cfg_dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub variant: MaskVariant,
    pub loss_scope: LossScope,
    /// One timestep for all AR steps of a sample, rather than one per step.
    pub shared_t: bool,
    /// Decay of the weight average stored in the checkpoint; 0 stores the
    /// raw weights.
    pub ema_decay: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        let a = AdamConfig::default();
        Self {
            timesteps: s.timesteps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            gamma: 0.5,
            cfg_dropout: 0.1,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            epochs: 200,
            batch_size: 64,
            variant: MaskVariant::Partial,
            loss_scope: LossScope::AllNoisy,
            shared_t: true,
            ema_decay: 0.999,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule_config().build()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "train.gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(Error::Config(format!(
                "train.cfg_dropout must lie in [0, 1], got {}",
                self.cfg_dropout
            )));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("train.lr and train.eps must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "train.ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// A fully assembled training example.
#[derive(Debug, Clone)]
pub struct TrainingSample<T: Scalar> {
    pub input: DenoiserInput<T>,
    /// Clean tokens the prediction is scored against (`l x d_token`).
    pub target: Matrix<T>,
    pub plan: ArPlan,
    /// Timestep of each AR step.
    pub block_t: Vec<usize>,
    /// Noisy rows that enter the loss.
    pub loss_rows: Range<usize>,
    /// Number of entries the squared error is divided by.
    pub loss_norm: usize,
}

/// Builds the denoiser input for a given plan, per-step timesteps, and noise.
#[allow(clippy::too_many_arguments)]
pub fn assemble_sample<T: Scalar>(
    cond: ConditionSequence<T>,
    x0: &Matrix<T>,
    plan: ArPlan,
    block_t: &[usize],
    noise: &Matrix<T>,
    schedule: &NoiseSchedule,
    variant: MaskVariant,
) -> Result<TrainingSample<T>> {
    let (l, d) = x0.shape();
    if plan.len() != l {
        return Err(Error::Contract(format!(
            "plan covers {} tokens, sample has {l}",
            plan.len()
        )));
    }
    if block_t.len() != plan.steps() {
        return Err(Error::Contract(format!(
            "{} timesteps for {} AR steps",
            block_t.len(),
            plan.steps()
        )));
    }
    let mask = build_mask(&plan, cond.len(), variant)?;
    let mut noisy_blocks = Vec::with_capacity(plan.steps());
    let mut timesteps = Vec::with_capacity(l);
    let mut alpha_bar = Vec::with_capacity(l);
    for (s, &t) in block_t.iter().enumerate() {
        let rows = plan.block(s);
        let len = rows.len();
        let x = x0.slice_rows(rows.start, len)?;
        let n = noise.slice_rows(rows.start, len)?;
        noisy_blocks.push(forward_diffuse(&x, t, schedule, &n)?);
        timesteps.extend(std::iter::repeat_n(t, len));
        alpha_bar.extend(std::iter::repeat_n(schedule.alpha_bar(t)?, len));
    }
    let noisy = Matrix::concat_rows(&noisy_blocks.iter().collect::<Vec<_>>())?;
    let clean_visible = x0.slice_rows(0, mask.v())?;
    Ok(TrainingSample {
        input: DenoiserInput {
            cond,
            clean_visible,
            noisy,
            timesteps,
            alpha_bar,
            mask,
        },
        target: x0.clone(),
        plan,
        block_t: block_t.to_vec(),
        loss_rows: 0..l,
        loss_norm: l * d,
    })
}

/// Draws plan, timesteps, dropout, noise, and loss scope for one example,
/// in that order.
pub fn prepare_sample<T: Scalar, R: Rng + ?Sized>(
    cond: &ConditionSequence<T>,
    x0: &Matrix<T>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingSample<T>> {
    let (l, d) = x0.shape();
    let plan = generate_ar_steps(l, cfg.gamma, rng)?;
    let t_max = schedule.timesteps();
    let block_t: Vec<usize> = if cfg.shared_t {
        vec![rng.random_range(1..=t_max); plan.steps()]
    } else {
        (0..plan.steps())
            .map(|_| rng.random_range(1..=t_max))
            .collect()
    };
    let cond = cfg_dropout(cond, cfg.cfg_dropout, rng);
    let noise = gaussian(rng, l, d);
    let mut sample = assemble_sample(cond, x0, plan, &block_t, &noise, schedule, cfg.variant)?;
    if cfg.loss_scope == LossScope::CurrentStep {
        let s = rng.random_range(0..sample.plan.steps());
        sample.loss_rows = sample.plan.block(s);
        sample.loss_norm = sample.loss_rows.len() * d;
    }
    Ok(sample)
}

/// Loss of each sample and the gradient of `Σ loss_i / batch` over the given
/// samples, from one tape.
pub fn sample_loss_and_grads<T: Scalar>(
    params: &DenoiserParams<T>,
    samples: &[&TrainingSample<T>],
    batch: usize,
) -> Result<(Vec<f64>, Weights<Matrix<T>>)> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape);
    let inputs: Vec<&DenoiserInput<T>> = samples.iter().map(|s| &s.input).collect();
    let trace = params.forward_on_tape(&mut tape, &w, &inputs)?;
    let mut losses = Vec::with_capacity(samples.len());
    let mut total = None;
    for (s, &out) in samples.iter().zip(&trace.outputs) {
        let target = tape.constant(s.target.clone());
        let diff = tape.sub(out, target)?;
        let rows = tape.slice_rows(diff, s.loss_rows.start, s.loss_rows.len())?;
        let sse = tape.sum_squares(rows);
        let per = tape.scale(sse, T::from_f64_lossy(1.0 / s.loss_norm as f64));
        losses.push(tape.value(per).get(0, 0).to_f64().unwrap());
        let term = tape.scale(per, T::from_f64_lossy(1.0 / batch as f64));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty sample list".into()))?;
    let grads = tape.backward(total)?;
    Ok((losses, w.map(|_, &v| grads.wrt(v))))
}

#[derive(Debug, Clone)]
pub struct StepOutput<T: Scalar> {
    /// Mean per-sample loss over the batch.
    pub loss: f64,
    pub grads: Weights<Matrix<T>>,
}

/// Loss and gradients for one mini-batch of `(condition, clean tokens)`.
pub fn training_step<T: Scalar, R: Rng + ?Sized>(
    batch: &[(&ConditionSequence<T>, &Matrix<T>)],
    params: &DenoiserParams<T>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
    step: usize,
) -> Result<StepOutput<T>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let samples: Vec<TrainingSample<T>> = batch
        .iter()
        .map(|(c, x)| prepare_sample(c, x, schedule, cfg, rng))
        .collect::<Result<_>>()?;
    let refs: Vec<&TrainingSample<T>> = samples.iter().collect();
    let parts: Vec<(Vec<f64>, Weights<Matrix<T>>)> = refs
        .par_chunks(CHUNK)
        .map(|chunk| sample_loss_and_grads(params, chunk, batch.len()))
        .collect::<Result<_>>()?;

    let mut losses = Vec::with_capacity(batch.len());
    let mut grads: Option<Weights<Matrix<T>>> = None;
    for (l, g) in parts {
        losses.extend(l);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                let add = g.tensors();
                let mut i = 0;
                acc.visit_mut(&mut |m| {
                    m.add_assign(add[i]).expect("gradient shapes agree");
                    i += 1;
                });
            }
        }
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Training {
            step,
            loss: losses[i],
            timesteps: samples[i].block_t.clone(),
            plan: samples[i].plan.sizes().to_vec(),
        });
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(StepOutput {
        loss,
        grads: grads.unwrap(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

/// Trains from scratch. Randomness is derived from `seed` under the labels
/// `init`, `shuffle`, and `train`.
pub fn train(
    records: &[Record],
    cfg: &TrainConfig,
    dcfg: &DenoiserConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    cfg.validate()?;
    dcfg.validate()?;
    if dcfg.timesteps != cfg.timesteps {
        return Err(Error::Config(format!(
            "model.timesteps ({}) differs from train.timesteps ({})",
            dcfg.timesteps, cfg.timesteps
        )));
    }
    for (i, r) in records.iter().enumerate() {
        if r.x0.shape() != (dcfg.l, dcfg.d_token) || r.cond.shape() != (dcfg.cl, dcfg.d_token) {
            return Err(Error::Config(format!(
                "record {i} has x0 {:?} and cond {:?}; model expects {}x{} and {}x{}",
                r.x0.shape(),
                r.cond.shape(),
                dcfg.l,
                dcfg.d_token,
                dcfg.cl,
                dcfg.d_token
            )));
        }
    }
    let schedule = cfg.schedule_config().build()?;
    let data: Vec<(ConditionSequence<f32>, Matrix<f32>)> = records
        .iter()
        .map(|r| (ConditionSequence::new(r.cond.cast()), r.x0.cast()))
        .collect();

    let mut params = init_params::<f32>(dcfg, derive_seed(seed, "init"))?;
    let mut ema = (cfg.ema_decay > 0.0).then(|| params.weights.clone());
    let mut state = AdamState::new(&params.weights);
    let adam = cfg.adam();
    let mut shuffle_rng = derived_rng(seed, "shuffle");
    let mut rng = derived_rng(seed, "train");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(&ConditionSequence<f32>, &Matrix<f32>)> =
                idx.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            let out = training_step(&batch, &params, &schedule, cfg, &mut rng, step)?;
            adam_update(&mut params.weights, &out.grads, &mut state, &adam)?;
            if let Some(avg) = &mut ema {
                // Short memory early on so the average is not anchored to the init.
                let d = cfg.ema_decay.min((1 + step) as f64 / (10 + step) as f64) as f32;
                let cur = params.weights.tensors();
                let mut i = 0;
                avg.visit_mut(&mut |m| {
                    for (a, &p) in m.as_mut_slice().iter_mut().zip(cur[i].as_slice()) {
                        *a = d * *a + (1.0 - d) * p;
                    }
                    i += 1;
                });
            }
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log::info!("epoch {epoch} step {step} loss {:.6}", out.loss);
            }
            losses.push(LossRecord {
                step,
                epoch,
                loss: out.loss,
            });
            step += 1;
        }
    }

    if let Some(avg) = ema {
        params.weights = avg;
    }
    let header = CheckpointHeader::new(*dcfg, *cfg, seed, cfg.epochs, step, &params);
    Ok(TrainOutcome {
        checkpoint: Checkpoint { header, params },
        losses,
    })
}
