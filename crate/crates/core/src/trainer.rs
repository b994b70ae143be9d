//! Noise-prediction training and full reverse-process evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Split};
use crate::denoiser::{self, GraphBatch};
use crate::diffusion::{
    consistent_noise, forward_sample, reverse_process_observed, DiffusionConfig, NoiseSchedule, PositionSet,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Placement};
use crate::model::Model;
use crate::nn::{Params, Tensor};
use crate::task::TaskInstance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Graphs (instances) per batch.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("adam_eps and clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, clip_norm: self.clip_norm }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

/// Adaptive-moment optimizer with global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new<P: Params<f32>>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Tensor<f32>> =
            params.named_tensors().into_iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn update<P: Params<f32>>(&mut self, params: &mut P, grads: &P) -> f64 {
        let grads = grads.named_tensors();
        let norm = grads.iter().flat_map(|(_, g)| &g.data).map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        let scale = if norm > self.config.clip_norm { (self.config.clip_norm / norm) as f32 } else { 1.0 };
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = (1.0 - c.beta1.powi(self.t as i32)) as f32;
        let bc2 = (1.0 - c.beta2.powi(self.t as i32)) as f32;
        let (lr, eps) = (c.lr as f32, c.eps as f32);
        for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i] * scale;
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        norm
    }
}

/// Noisy inputs for one batch: `x_t`, the noise that produced it and the per-graph timesteps.
pub struct NoisedBatch {
    pub x_t: Vec<f64>,
    pub eps: Vec<f64>,
    pub timesteps: Vec<usize>,
}

/// Draws one `t` per graph from `1..=T` and unit Gaussian noise per node coordinate.
pub fn noise_batch<R: Rng + ?Sized>(
    batch: &[&TaskInstance],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoisedBatch> {
    let mut out = NoisedBatch { x_t: Vec::new(), eps: Vec::new(), timesteps: Vec::with_capacity(batch.len()) };
    for inst in batch {
        let x0 = inst.gt_positions()?;
        let dim = x0.len() / inst.len();
        let t = rng.random_range(1..=sched.steps());
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = forward_sample(&PositionSet::new(dim, x0)?, t, &PositionSet::new(dim, eps.clone())?, sched)?;
        out.x_t.extend(x_t.into_coords());
        out.eps.extend(eps);
        out.timesteps.push(t);
    }
    Ok(out)
}

/// Simple loss and gradients for every encoder and denoiser parameter.
pub fn loss_and_gradients(
    model: &Model<f32>,
    batch: &[&TaskInstance],
    noised: &NoisedBatch,
) -> Result<(f64, Model<f32>)> {
    let (features, enc_cache) = model.encode(batch)?;
    let sizes: Vec<usize> = batch.iter().map(|i| i.len()).collect();
    let gb = GraphBatch::new(
        &sizes,
        features,
        noised.x_t.iter().map(|&v| v as f32).collect(),
        noised.timesteps.clone(),
        model.denoiser.config.feature_dim,
        model.position_dim(),
    )?;
    let (out, cache) = denoiser::forward(&model.denoiser, &gb)?;
    let eps: Vec<f32> = noised.eps.iter().map(|&v| v as f32).collect();
    let (loss, d_out) = denoiser::mse_and_grad(&out, &eps)?;
    let mut grads = model.zeros_like();
    if loss.is_finite() {
        let d_features = denoiser::backward(&model.denoiser, &cache, &d_out, &mut grads.denoiser);
        model.encoder_backward(&enc_cache, &d_features, &mut grads);
    }
    Ok((loss, grads))
}

/// One optimizer update on `batch`; returns the pre-update loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model<f32>,
    opt: &mut Adam,
    batch: &[&TaskInstance],
    sched: &NoiseSchedule,
    rng: &mut R,
    batch_id: u64,
) -> Result<f64> {
    if sched.steps() != model.steps() {
        return Err(Error::DimensionMismatch {
            what: "diffusion steps T".into(),
            expected: model.steps(),
            found: sched.steps(),
        });
    }
    let noised = noise_batch(batch, sched, rng)?;
    let (loss, grads) = loss_and_gradients(model, batch, &noised)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: batch_id });
    }
    opt.update(model, &grads);
    Ok(loss)
}

/// Batch composition for one epoch, derived from `(seed, epoch)` only.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE90C, epoch])));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// RNG for the update with global index `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x57E9, step]))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub opt: Adam,
    /// Updates completed so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model<f32>, cfg: &TrainConfig) -> Self {
        let opt = Adam::new(cfg.adam(), &model);
        Self { model, opt, step: 0 }
    }
}

pub fn total_steps(len: usize, cfg: &TrainConfig) -> u64 {
    (cfg.epochs * len.div_ceil(cfg.batch_size)) as u64
}

/// Trains until `cfg.epochs` are complete (or `stop_at` steps), resuming from `state.step`.
///
/// `on_step` sees every record after its update.
pub fn train<C>(
    state: &mut TrainState,
    data: &[TaskInstance],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    stop_at: Option<u64>,
    mut on_step: C,
) -> Result<()>
where
    C: FnMut(&StepRecord, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training instances".into()));
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let end = stop_at.map_or(total_steps(data.len(), cfg), |s| s.min(total_steps(data.len(), cfg)));
    let start = Instant::now();
    let mut cached: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.step < end {
        let epoch = state.step / per_epoch;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch)));
        }
        let batches = &cached.as_ref().expect("just set").1;
        let idx = &batches[(state.step % per_epoch) as usize];
        let batch: Vec<&TaskInstance> = idx.iter().map(|&i| &data[i]).collect();
        let mut rng = step_rng(cfg.seed, state.step);
        let loss = train_step(&mut state.model, &mut state.opt, &batch, sched, &mut rng, state.step)?;
        state.step += 1;
        let rec = StepRecord { step: state.step, epoch, loss, lr: cfg.lr, wall_time: start.elapsed().as_secs_f64() };
        on_step(&rec, state)?;
    }
    Ok(())
}

/// Source of noise estimates during evaluation.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model<f32>),
    /// Plants the noise that leads exactly to the ground-truth positions.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Instances denoised together.
    pub batch_size: usize,
    /// Entropy for standard-Gaussian initialization.
    pub seed: u64,
    /// Split scored by the evaluation command.
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 64, seed: 0, split: Split::Test }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub placements: Vec<Placement>,
    /// Final continuous positions per instance.
    pub positions: Vec<Vec<f64>>,
}

/// Runs the reverse process jointly over `chunk`, reporting every visited state.
pub fn reverse_chunk<O>(
    predictor: Predictor<'_>,
    chunk: &[&TaskInstance],
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    rng: Option<&mut dyn RngCore>,
    observe: O,
) -> Result<PositionSet>
where
    O: FnMut(usize, &PositionSet),
{
    let sizes: Vec<usize> = chunk.iter().map(|i| i.len()).collect();
    let count: usize = sizes.iter().sum();
    let dim = match predictor {
        Predictor::Model(m) => {
            if m.steps() != cfg.steps {
                return Err(Error::DimensionMismatch {
                    what: "diffusion steps T".into(),
                    expected: cfg.steps,
                    found: m.steps(),
                });
            }
            m.position_dim()
        }
        Predictor::Oracle => chunk.first().map_or(1, |i| i.task().position_dim()),
    };
    match predictor {
        Predictor::Model(model) => {
            let (features, _) = model.encode(chunk)?;
            let fd = model.denoiser.config.feature_dim;
            reverse_process_observed(
                |x: &PositionSet, t| {
                    let gb = GraphBatch::new(
                        &sizes,
                        features.clone(),
                        x.coords().iter().map(|&v| v as f32).collect(),
                        vec![t; sizes.len()],
                        fd,
                        dim,
                    )?;
                    let out = denoiser::denoise(&model.denoiser, &gb)?;
                    PositionSet::new(dim, out.into_iter().map(f64::from).collect())
                },
                count,
                dim,
                cfg,
                sched,
                rng,
                observe,
            )
        }
        Predictor::Oracle => {
            let mut target = Vec::with_capacity(count * dim);
            for inst in chunk {
                target.extend(inst.gt_positions()?);
            }
            let target = PositionSet::new(dim, target)?;
            reverse_process_observed(
                |x: &PositionSet, t| consistent_noise(x, &target, t, sched),
                count,
                dim,
                cfg,
                sched,
                rng,
                observe,
            )
        }
    }
}

/// Entropy for the reverse-process initialization of evaluation chunk `chunk`.
pub fn eval_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE7A1, chunk]))
}

/// Denoises every instance from the configured initialization, decodes and scores.
pub fn evaluate(
    predictor: Predictor<'_>,
    instances: &[TaskInstance],
    cfg: &DiffusionConfig,
    eval: &EvalConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    let sched = NoiseSchedule::from_config(cfg)?;
    let mut placements = Vec::with_capacity(instances.len());
    let mut positions = Vec::with_capacity(instances.len());
    for (c, chunk) in instances.chunks(eval.batch_size.max(1)).enumerate() {
        let refs: Vec<&TaskInstance> = chunk.iter().collect();
        let mut rng = eval_rng(eval.seed, c as u64);
        let x = reverse_chunk(predictor, &refs, cfg, &sched, Some(&mut rng), |_, _| {})?;
        let dim = x.dim();
        let mut offset = 0;
        for inst in chunk {
            let pred = &x.coords()[offset * dim..(offset + inst.len()) * dim];
            offset += inst.len();
            placements.push(inst.placement(&inst.decode(pred)?)?);
            positions.push(pred.to_vec());
        }
    }
    let report = MetricsReport::from_placements(&placements)?;
    Ok(Evaluation { report, placements, positions })
}
