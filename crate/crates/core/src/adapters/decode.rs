use std::cmp::Ordering;

use super::grid::GridSpec;
use crate::error::{Error, Result};

/// Element index -> slot index (grid cell or rank). Injective.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub slots: Vec<usize>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_injective(&self) -> bool {
        let mut s = self.slots.clone();
        s.sort_unstable();
        s.windows(2).all(|w| w[0] != w[1])
    }
}

/// Commits patch/cell pairs by increasing Euclidean distance.
///
/// Ties are broken by `(patch, cell)` in lexicographic order.
pub fn greedy_assign(pred: &[f64], grid: &GridSpec) -> Result<Assignment> {
    if !pred.len().is_multiple_of(2) {
        return Err(Error::ShapeMismatch { expected: "[K, 2] positions".into(), got: pred.len().to_string() });
    }
    let k = pred.len() / 2;
    let cells = grid.num_cells();
    if k > cells {
        return Err(Error::TooManyElements { elements: k, slots: cells });
    }
    if let Some(i) = pred.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinitePosition(i / 2));
    }
    let mut pairs = Vec::with_capacity(k * cells);
    for p in 0..k {
        let (x, y) = (pred[2 * p], pred[2 * p + 1]);
        for (c, center) in grid.centers().iter().enumerate() {
            let d = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
            pairs.push((d, p, c));
        }
    }
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut slots = vec![usize::MAX; k];
    let mut taken = vec![false; cells];
    let mut remaining = k;
    for (_, p, c) in pairs {
        if remaining == 0 {
            break;
        }
        if slots[p] == usize::MAX && !taken[c] {
            slots[p] = c;
            taken[c] = true;
            remaining -= 1;
        }
    }
    Ok(Assignment { slots })
}

/// Ranks elements by ascending scalar position; equal positions keep input order.
pub fn order_from_positions(pred: &[f64]) -> Result<Assignment> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("positions"));
    }
    if let Some(i) = pred.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinitePosition(i));
    }
    let mut idx: Vec<usize> = (0..pred.len()).collect();
    idx.sort_by(|&a, &b| pred[a].partial_cmp(&pred[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut slots = vec![0; pred.len()];
    for (rank, &e) in idx.iter().enumerate() {
        slots[e] = rank;
    }
    Ok(Assignment { slots })
}

/// Minimum total-distance injective assignment by dynamic programming over
/// subsets of slots. Exponential in the number of slots; for checking only.
pub fn optimal_assignment_bruteforce(pred: &[f64], grid: &GridSpec) -> Assignment {
    let k = pred.len() / 2;
    let cells = grid.num_cells();
    assert!(cells <= 16 && k <= cells);
    let dist = |p: usize, c: usize| {
        let ctr = grid.centers()[c];
        ((pred[2 * p] - ctr[0]).powi(2) + (pred[2 * p + 1] - ctr[1]).powi(2)).sqrt()
    };
    let full = 1usize << cells;
    // best[mask] = min cost of assigning the first popcount(mask) elements to `mask`
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        let p = mask.count_ones() as usize;
        if p >= k || !best[mask].is_finite() {
            continue;
        }
        for c in 0..cells {
            if mask & (1 << c) != 0 {
                continue;
            }
            let next = mask | (1 << c);
            let cost = best[mask] + dist(p, c);
            if cost < best[next] {
                best[next] = cost;
                choice[next] = c;
            }
        }
    }
    let (mut mask, _) = (0..full)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (m, best[m]))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let mut slots = vec![0; k];
    for p in (0..k).rev() {
        let c = choice[mask];
        slots[p] = c;
        mask &= !(1 << c);
    }
    Assignment { slots }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::instance::seeded_permutation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn total_cost(pred: &[f64], grid: &GridSpec, a: &Assignment) -> f64 {
        a.slots
            .iter()
            .enumerate()
            .map(|(p, &c)| {
                let ctr = grid.centers()[c];
                ((pred[2 * p] - ctr[0]).powi(2) + (pred[2 * p + 1] - ctr[1]).powi(2)).sqrt()
            })
            .sum()
    }

    /// Exhaustive enumeration of injective maps, independent of the subset DP.
    fn enumerate_best(pred: &[f64], grid: &GridSpec) -> f64 {
        fn rec(p: usize, k: usize, used: &mut Vec<bool>, cost: f64, pred: &[f64], grid: &GridSpec, best: &mut f64) {
            if p == k {
                *best = best.min(cost);
                return;
            }
            for c in 0..grid.num_cells() {
                if used[c] {
                    continue;
                }
                used[c] = true;
                let ctr = grid.centers()[c];
                let d = ((pred[2 * p] - ctr[0]).powi(2) + (pred[2 * p + 1] - ctr[1]).powi(2)).sqrt();
                rec(p + 1, k, used, cost + d, pred, grid, best);
                used[c] = false;
            }
        }
        let mut best = f64::INFINITY;
        rec(0, pred.len() / 2, &mut vec![false; grid.num_cells()], 0.0, pred, grid, &mut best);
        best
    }

    #[test]
    fn exact_centers_recover_bijection() {
        let grid = GridSpec::new(3).unwrap();
        let perm = seeded_permutation(9, 3);
        let pred = grid.positions_of(&perm);
        assert_eq!(greedy_assign(&pred, &grid).unwrap().slots, perm);
    }

    #[test]
    fn small_perturbations_match_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 2..=3 {
            let grid = GridSpec::new(n).unwrap();
            for trial in 0..50 {
                let k = rng.random_range(1..=n * n);
                let cells = &seeded_permutation(n * n, trial)[..k];
                let mut pred = grid.positions_of(cells);
                for p in 0..k {
                    let r = rng.random_range(0.0..0.99) / n as f64;
                    let th = rng.random_range(0.0..std::f64::consts::TAU);
                    pred[2 * p] += r * th.cos();
                    pred[2 * p + 1] += r * th.sin();
                }
                let g = greedy_assign(&pred, &grid).unwrap();
                assert_eq!(g.slots, cells);
                assert_eq!(optimal_assignment_bruteforce(&pred, &grid).slots, cells);
            }
        }
    }

    #[test]
    fn collision_resolved_by_distance_then_next_free_cell() {
        let grid = GridSpec::new(2).unwrap();
        // patches 0 and 1 both nearest to cell 0 (-0.5, -0.5); patch 1 is closer
        let pred = [-0.2, -0.2, -0.45, -0.45, 0.5, 0.5];
        let a = greedy_assign(&pred, &grid).unwrap();
        assert_eq!(a.slots[1], 0);
        assert_eq!(a.slots[2], 3);
        // patch 0 takes the nearer of the free cells 1 and 2: equidistant, tie to lower cell index
        assert_eq!(a.slots[0], 1);
        // here greedy also attains the exhaustive optimum
        let opt = enumerate_best(&pred, &grid);
        assert!((total_cost(&pred, &grid, &a) - opt).abs() < 1e-12);
    }

    #[test]
    fn subset_dp_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let grid = GridSpec::new(2).unwrap();
        for _ in 0..200 {
            let k = rng.random_range(1..=4);
            let pred: Vec<f64> = (0..2 * k).map(|_| rng.random_range(-1.5..1.5)).collect();
            let a = optimal_assignment_bruteforce(&pred, &grid);
            assert!((total_cost(&pred, &grid, &a) - enumerate_best(&pred, &grid)).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_rejects_too_many_patches() {
        let grid = GridSpec::new(1).unwrap();
        assert!(matches!(greedy_assign(&[0.0; 4], &grid), Err(Error::TooManyElements { .. })));
        assert!(greedy_assign(&[f64::NAN, 0.0], &grid).is_err());
    }

    #[test]
    fn greedy_always_injective_and_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..500 {
            let n = rng.random_range(1..=5);
            let grid = GridSpec::new(n).unwrap();
            let pred: Vec<f64> = (0..2 * n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = greedy_assign(&pred, &grid).unwrap();
            assert!(a.is_injective());
            assert!(a.slots.iter().all(|&c| c < n * n));
        }
    }

    #[test]
    fn ordering_examples() {
        assert_eq!(order_from_positions(&[-0.5, 0.1, 0.7]).unwrap().slots, vec![0, 1, 2]);
        assert_eq!(order_from_positions(&[0.7, 0.1, -0.5]).unwrap().slots, vec![2, 1, 0]);
        assert!(order_from_positions(&[]).is_err());
        assert!(order_from_positions(&[0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn ordering_ties_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let k = rng.random_range(1..10);
            let pred: Vec<f64> = (0..k).map(|_| rng.random_range(0..4) as f64 * 0.25).collect();
            // reference: std stable sort on (value) keeps original order on ties
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| pred[a].partial_cmp(&pred[b]).unwrap());
            let a = order_from_positions(&pred).unwrap();
            for (rank, &e) in idx.iter().enumerate() {
                assert_eq!(a.slots[e], rank);
            }
        }
    }
}
