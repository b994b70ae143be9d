//! Feature encoder plus denoiser, trained jointly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::encoders::{PatchEncoderCache, SequenceEncoderCache};
use crate::adapters::{Patch, PatchEncoder, PatchEncoderConfig, SequenceEncoder, SequenceEncoderConfig};
use crate::data::derive_seed;
use crate::denoiser::{init_params, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::nn::layers::join;
use crate::nn::{Float, Params, Tensor};
use crate::task::{Task, TaskInstance};

/// Architecture hyperparameters shared by both tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub time_dim: usize,
    /// Node feature size `d` produced by the encoder.
    pub feature_dim: usize,
    /// Patch encoder convolution channels.
    pub channels: [usize; 3],
    pub vocab: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            time_dim: 32,
            feature_dim: 64,
            channels: [16, 32, 64],
            vocab: 512,
            max_tokens: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn denoiser_config(&self, task: Task, steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            width: self.width,
            heads: self.heads,
            time_dim: self.time_dim,
            feature_dim: self.feature_dim,
            position_dim: task.position_dim(),
            steps,
        }
    }

    pub fn validate(&self, task: Task, steps: usize) -> Result<()> {
        self.denoiser_config(task, steps).validate()?;
        if self.channels.contains(&0) || self.vocab == 0 || self.max_tokens == 0 {
            return Err(Error::InvalidDims(format!(
                "channels {:?}, vocab {}, max_tokens {} must be positive",
                self.channels, self.vocab, self.max_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder<F> {
    Patch(PatchEncoder<F>),
    Sequence(SequenceEncoder<F>),
}

pub enum EncoderCache<F> {
    Patch(PatchEncoderCache<F>),
    Sequence(SequenceEncoderCache<F>),
}

impl<F: Float> Params<F> for Encoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        match self {
            Encoder::Patch(e) => e.visit(prefix, f),
            Encoder::Sequence(e) => e.visit(prefix, f),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        match self {
            Encoder::Patch(e) => e.visit_mut(prefix, f),
            Encoder::Sequence(e) => e.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub task: Task,
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub denoiser: DenoiserParams<F>,
}

impl<F: Float> Params<F> for Model<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.denoiser.visit(&join(prefix, "denoiser"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<F>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.denoiser.visit_mut(&join(prefix, "denoiser"), f);
    }
}

impl<F: Float> Model<F> {
    /// Deterministic initialization from `config.seed`.
    pub fn new(task: Task, config: &ModelConfig, steps: usize) -> Result<Self> {
        config.validate(task, steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[10]));
        let encoder = match task {
            Task::Puzzle => Encoder::Patch(PatchEncoder::new(
                &mut rng,
                &PatchEncoderConfig { channels: config.channels, feature_dim: config.feature_dim },
            )),
            Task::Sequence => Encoder::Sequence(SequenceEncoder::new(
                &mut rng,
                &SequenceEncoderConfig {
                    vocab: config.vocab,
                    feature_dim: config.feature_dim,
                    max_tokens: config.max_tokens,
                },
            )),
        };
        let denoiser = init_params(derive_seed(config.seed, &[11]), &config.denoiser_config(task, steps))?;
        Ok(Self { task, config: config.clone(), encoder, denoiser })
    }

    pub fn position_dim(&self) -> usize {
        self.denoiser.config.position_dim
    }

    pub fn steps(&self) -> usize {
        self.denoiser.config.steps
    }

    /// Node features `[N, d]` for the concatenated elements of `instances`.
    pub fn encode(&self, instances: &[&TaskInstance]) -> Result<(Vec<F>, EncoderCache<F>)> {
        for inst in instances {
            if inst.task() != self.task {
                return Err(Error::TaskMismatch { expected: self.task.to_string(), got: inst.task().to_string() });
            }
        }
        match &self.encoder {
            Encoder::Patch(enc) => {
                let patches: Vec<&Patch> = instances
                    .iter()
                    .flat_map(|i| match i {
                        TaskInstance::Puzzle(p) => p.elements.iter(),
                        TaskInstance::Sequence(_) => unreachable!(),
                    })
                    .collect();
                let (f, c) = enc.forward(&patches)?;
                Ok((f, EncoderCache::Patch(c)))
            }
            Encoder::Sequence(enc) => {
                let tokens: Vec<&[u32]> = instances
                    .iter()
                    .flat_map(|i| match i {
                        TaskInstance::Sequence(s) => s.elements.iter().map(|e| e.as_slice()),
                        TaskInstance::Puzzle(_) => unreachable!(),
                    })
                    .collect();
                let (f, c) = enc.forward(&tokens)?;
                Ok((f, EncoderCache::Sequence(c)))
            }
        }
    }

    /// Accumulates encoder gradients for `dL/dh` into `grad.encoder`.
    pub fn encoder_backward(&self, cache: &EncoderCache<F>, d_features: &[F], grad: &mut Model<F>) {
        match (&self.encoder, cache, &mut grad.encoder) {
            (Encoder::Patch(e), EncoderCache::Patch(c), Encoder::Patch(g)) => e.backward(c, d_features, g),
            (Encoder::Sequence(e), EncoderCache::Sequence(c), Encoder::Sequence(g)) => e.backward(c, d_features, g),
            _ => panic!("encoder, cache and gradient kinds differ"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { width: 16, heads: 2, time_dim: 4, feature_dim: 8, channels: [4, 4, 4], vocab: 64, ..Default::default() }
    }

    #[test]
    fn parameter_names_are_prefixed_and_unique() {
        for task in [Task::Puzzle, Task::Sequence] {
            let m: Model<f32> = Model::new(task, &small(), 10).unwrap();
            let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
            assert!(names.iter().all(|n| n.starts_with("encoder.") || n.starts_with("denoiser.")));
            let mut sorted = names.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), names.len());
            assert_eq!(m.position_dim(), task.position_dim());
        }
    }

    #[test]
    fn initialization_is_seeded() {
        let a: Model<f32> = Model::new(Task::Sequence, &small(), 10).unwrap();
        assert_eq!(a, Model::new(Task::Sequence, &small(), 10).unwrap());
        let b: Model<f32> = Model::new(Task::Sequence, &ModelConfig { seed: 1, ..small() }, 10).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_rejects_other_task() {
        let m: Model<f32> = Model::new(Task::Puzzle, &small(), 10).unwrap();
        let s = TaskInstance::Sequence(crate::adapters::SequenceInstance::ordered("s", vec![vec![1], vec![2]]));
        assert!(matches!(m.encode(&[&s]), Err(Error::TaskMismatch { .. })));
    }
}
