//! Complete run configuration: one section per stage.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, DatasetSpec};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::task::Task;
use crate::trainer::{EvalConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults for `task`: procedural puzzles or synthetic sequences.
    pub fn for_task(task: Task) -> Self {
        let dataset = match task {
            Task::Puzzle => DatasetSpec::default(),
            Task::Sequence => DatasetSpec::sequences(),
        };
        Self { dataset, ..Self::default() }
    }

    pub fn task(&self) -> Task {
        match self.dataset.kind {
            DatasetKind::ProceduralImage | DatasetKind::ImageDir => Task::Puzzle,
            DatasetKind::SyntheticSequence => Task::Sequence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.diffusion.validate()?;
        self.model.validate(self.task(), self.diffusion.steps)?;
        self.train.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::InvalidConfig("eval batch_size must be positive".into()));
        }
        if self.task() == Task::Sequence && self.model.vocab < self.dataset.vocab {
            return Err(Error::InvalidConfig(format!(
                "model vocab {} is smaller than dataset vocab {}",
                self.model.vocab, self.dataset.vocab
            )));
        }
        Ok(())
    }
}
