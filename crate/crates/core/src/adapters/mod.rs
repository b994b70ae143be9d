//! Task adapters: turn puzzles and sequences into (features, positions) and
//! decode predicted positions back into discrete placements.

pub mod decode;
pub mod encoders;
pub mod grid;
pub mod instance;
pub mod patches;

pub use decode::{greedy_assign, order_from_positions, Assignment};
pub use encoders::{PatchEncoder, PatchEncoderConfig, SequenceEncoder, SequenceEncoderConfig};
pub use grid::{make_grid, sequence_positions, GridSpec};
pub use instance::{shuffle_instance, Instance, PuzzleInstance, SequenceInstance};
pub use patches::{patchify, render_placement, Image, Patch, PATCH_SIZE};
