use crate::error::{Error, Result};

/// Centers of an `n x n` uniform partition of `[-1, 1]^2`.
///
/// Cell `(row, col)` has index `row * n + col` and center
/// `(-1 + (2 col + 1) / n, -1 + (2 row + 1) / n)`; x runs along columns and y
/// along rows, so raster order of cells matches raster order of patches.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    side: usize,
    centers: Vec<[f64; 2]>,
}

impl GridSpec {
    pub fn new(side: usize) -> Result<Self> {
        if side < 1 {
            return Err(Error::InvalidGrid);
        }
        let n = side as f64;
        let mut centers = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                centers.push([
                    -1.0 + (2 * col + 1) as f64 / n,
                    -1.0 + (2 * row + 1) as f64 / n,
                ]);
            }
        }
        Ok(Self { side, centers })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_cells(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.side as f64
    }

    /// Flattened `[K, 2]` positions of the cells listed in `cells`.
    pub fn positions_of(&self, cells: &[usize]) -> Vec<f64> {
        cells.iter().flat_map(|&c| self.centers[c]).collect()
    }
}

pub fn make_grid(side: usize) -> Result<GridSpec> {
    GridSpec::new(side)
}

/// Centers of `count` equal subintervals of `(-1, 1)`; rank 0 gets the smallest value.
pub fn sequence_positions(count: usize) -> Result<Vec<f64>> {
    if count < 1 {
        return Err(Error::TooFewElements { got: count, min: 1 });
    }
    let k = count as f64;
    Ok((0..count).map(|i| -1.0 + (2 * i + 1) as f64 / k).collect())
}
