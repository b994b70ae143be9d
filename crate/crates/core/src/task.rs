//! Task-tagged instances and their conversion to and from positions.

use serde::{Deserialize, Serialize};

use crate::adapters::{
    greedy_assign, order_from_positions, patchify, sequence_positions, shuffle_instance, Assignment, GridSpec,
    PuzzleInstance, SequenceInstance,
};
use crate::data::{derive_seed, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::Placement;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Puzzle,
    Sequence,
}

impl Task {
    /// Dimension `n` of the positions being diffused.
    pub fn position_dim(self) -> usize {
        match self {
            Task::Puzzle => 2,
            Task::Sequence => 1,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Puzzle => "puzzle",
            Task::Sequence => "sequence",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "puzzle" => Ok(Task::Puzzle),
            "sequence" => Ok(Task::Sequence),
            other => Err(Error::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskInstance {
    Puzzle(PuzzleInstance),
    Sequence(SequenceInstance),
}

impl TaskInstance {
    pub fn task(&self) -> Task {
        match self {
            TaskInstance::Puzzle(_) => Task::Puzzle,
            TaskInstance::Sequence(_) => Task::Sequence,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            TaskInstance::Puzzle(p) => &p.id,
            TaskInstance::Sequence(s) => &s.id,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskInstance::Puzzle(p) => p.len(),
            TaskInstance::Sequence(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gt_slot(&self) -> &[usize] {
        match self {
            TaskInstance::Puzzle(p) => &p.gt_slot,
            TaskInstance::Sequence(s) => &s.gt_slot,
        }
    }

    /// Ground-truth positions `x_0`, `[K, n]` flattened.
    pub fn gt_positions(&self) -> Result<Vec<f64>> {
        match self {
            TaskInstance::Puzzle(p) => Ok(GridSpec::new(p.grid_side())?.positions_of(&p.gt_slot)),
            TaskInstance::Sequence(s) => {
                let pos = sequence_positions(s.len())?;
                Ok(s.gt_slot.iter().map(|&r| pos[r]).collect())
            }
        }
    }

    /// Discrete slots from continuous predicted positions.
    pub fn decode(&self, pred: &[f64]) -> Result<Assignment> {
        match self {
            TaskInstance::Puzzle(p) => greedy_assign(pred, &GridSpec::new(p.grid_side())?),
            TaskInstance::Sequence(_) => order_from_positions(pred),
        }
    }

    pub fn placement(&self, assignment: &Assignment) -> Result<Placement> {
        Placement::new(assignment.slots.clone(), self.gt_slot().to_vec())
    }

    /// Same instance presented in a different order (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(match self {
            TaskInstance::Puzzle(p) => TaskInstance::Puzzle(p.permuted(perm)?),
            TaskInstance::Sequence(s) => TaskInstance::Sequence(s.permuted(perm)?),
        })
    }
}

/// Shuffled instances for one split. Every image yields one puzzle per grid
/// size; shuffling uses the seed recorded in the manifest.
pub fn instances_from_dataset(dataset: &Dataset, split: Split) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    match dataset {
        Dataset::Images { manifest, records } => {
            for r in records.iter().filter(|r| r.entry.split == split) {
                for &n in &manifest.spec.grid_sizes {
                    let ordered = PuzzleInstance::ordered(format!("{}/n{n}", r.entry.id), patchify(&r.image, n)?);
                    out.push(TaskInstance::Puzzle(shuffle_instance(&ordered, derive_seed(r.entry.seed, &[n as u64]))));
                }
            }
        }
        Dataset::Sequences { records, .. } => {
            for r in records.iter().filter(|r| r.entry.split == split) {
                let ordered = SequenceInstance::ordered(r.entry.id.clone(), r.elements.clone());
                out.push(TaskInstance::Sequence(shuffle_instance(&ordered, derive_seed(r.entry.seed, &[0]))));
            }
        }
    }
    Ok(out)
}

pub fn dataset_task(dataset: &Dataset) -> Task {
    if dataset.is_images() {
        Task::Puzzle
    } else {
        Task::Sequence
    }
}
