use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use super::{contract, DataError, Dataset};
use crate::rng::rng_from;

/// Binary availability matrix: bit `(i, m)` is false when modality `m` of
/// sample `i` is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
    pub p_m: f64,
    pub p_s: f64,
    pub seed: u64,
}

impl MissingMatrix {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.cols..(row + 1) * self.cols]
    }

    pub fn zeros_in_row(&self, row: usize) -> usize {
        self.row(row).iter().filter(|&&b| !b).count()
    }

    /// Rows with at least one missing modality.
    pub fn affected_rows(&self) -> usize {
        (0..self.rows).filter(|&r| self.zeros_in_row(r) > 0).count()
    }

    /// Fraction of all modality slots that are missing.
    pub fn missing_degree(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|&&b| !b).count() as f64 / self.bits.len() as f64
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), DataError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(contract(format!("{name} must be in [0, 1], got {p}")))
    }
}

/// Picks `round(p_s * rows)` rows without replacement and, in each, zeroes
/// `round(p_m * cols)` distinct columns.
pub fn make_missing_matrix(rows: usize, cols: usize, p_m: f64, p_s: f64, seed: u64) -> Result<MissingMatrix, DataError> {
    check_prob("p_m", p_m)?;
    check_prob("p_s", p_s)?;
    let mut bits = vec![true; rows * cols];
    let n_rows = libm::round(p_s * rows as f64) as usize;
    let n_cols = libm::round(p_m * cols as f64) as usize;
    if n_rows > 0 && n_cols > 0 {
        let mut rng = rng_from(seed);
        let mut chosen = index::sample(&mut rng, rows, n_rows).into_vec();
        chosen.sort_unstable();
        for r in chosen {
            for c in index::sample(&mut rng, cols, n_cols) {
                bits[r * cols + c] = false;
            }
        }
    }
    Ok(MissingMatrix {
        rows,
        cols,
        bits,
        p_m,
        p_s,
        seed,
    })
}

/// Zeroes every masked modality and clears its presence flag. Presence
/// already cleared stays cleared, so applying a mask twice is a no-op.
pub fn apply_missing(dataset: &Dataset, mask: &MissingMatrix) -> Result<Dataset, DataError> {
    if mask.rows != dataset.len() || mask.cols != dataset.num_modalities {
        return Err(contract(format!(
            "apply_missing: mask is {}x{}, dataset is {}x{}",
            mask.rows,
            mask.cols,
            dataset.len(),
            dataset.num_modalities
        )));
    }
    let mut out = dataset.clone();
    for (i, s) in out.samples.iter_mut().enumerate() {
        for m in 0..mask.cols {
            if !mask.get(i, m) {
                s.presence[m] = false;
                s.modalities[m].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(out)
}
