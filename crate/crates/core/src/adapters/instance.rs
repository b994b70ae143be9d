use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::patches::Patch;
use crate::error::{Error, Result};

/// A set of elements presented in some order, with their true slots.
///
/// `gt_slot[i]` is the ground-truth slot (grid cell or sequence rank) of the
/// element presented at index `i`. `shuffle_perm[i]` is the index that element
/// had in the original, unshuffled presentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance<E> {
    pub id: String,
    pub elements: Vec<E>,
    pub gt_slot: Vec<usize>,
    pub shuffle_perm: Vec<usize>,
}

/// Puzzle pieces; `gt_slot` holds raster cell indices of an `n x n` grid.
pub type PuzzleInstance = Instance<Patch>;
/// Token arrays; `gt_slot` holds ranks.
pub type SequenceInstance = Instance<Vec<u32>>;

impl<E: Clone> Instance<E> {
    /// Elements given in ground-truth order (element `i` belongs in slot `i`).
    pub fn ordered(id: impl Into<String>, elements: Vec<E>) -> Self {
        let k = elements.len();
        Self { id: id.into(), elements, gt_slot: (0..k).collect(), shuffle_perm: (0..k).collect() }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Reorders the presentation by `perm` (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.len())?;
        Ok(Self {
            id: self.id.clone(),
            elements: perm.iter().map(|&p| self.elements[p].clone()).collect(),
            gt_slot: perm.iter().map(|&p| self.gt_slot[p]).collect(),
            shuffle_perm: perm.iter().map(|&p| self.shuffle_perm[p]).collect(),
        })
    }
}

impl PuzzleInstance {
    pub fn grid_side(&self) -> usize {
        let k = self.len();
        let n = (k as f64).sqrt().round() as usize;
        debug_assert_eq!(n * n, k);
        n
    }
}

pub fn check_permutation(perm: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    if perm.len() != len {
        return Err(Error::ShapeMismatch { expected: format!("permutation of {len}"), got: perm.len().to_string() });
    }
    for &p in perm {
        if p >= len || seen[p] {
            return Err(Error::ShapeMismatch {
                expected: format!("permutation of {len}"),
                got: format!("{perm:?}"),
            });
        }
        seen[p] = true;
    }
    Ok(())
}

/// Uniformly random permutation of `0..len` determined by `seed`.
pub fn seeded_permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Shuffles the presentation order; the task itself (which element belongs where) is unchanged.
pub fn shuffle_instance<E: Clone>(instance: &Instance<E>, seed: u64) -> Instance<E> {
    let perm = seeded_permutation(instance.len(), seed);
    instance.permuted(&perm).expect("seeded permutation is valid")
}
