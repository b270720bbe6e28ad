use nalgebra::DMatrix;
use rand::Rng;

use super::stream_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapSpec {
    /// Restart probability; expected block length is `1 / block_prob`.
    pub block_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraw {
    pub data: DMatrix<f64>,
    /// Source row of every output row.
    pub indices: Vec<usize>,
    /// Output rows that start a new block.
    pub block_starts: Vec<bool>,
}

/// Stationary-bootstrap index sequence of length `len_out` over `len_in` rows.
///
/// Each step restarts at a uniform row with probability `block_prob`,
/// otherwise continues with the next row, wrapping around circularly.
pub fn stationary_indices<R: Rng>(len_in: usize, len_out: usize, block_prob: f64, rng: &mut R) -> (Vec<usize>, Vec<bool>) {
    let mut idx = Vec::with_capacity(len_out);
    let mut starts = Vec::with_capacity(len_out);
    for t in 0..len_out {
        if t == 0 || rng.random::<f64>() < block_prob {
            idx.push(rng.random_range(0..len_in));
            starts.push(true);
        } else {
            idx.push((idx[t - 1] + 1) % len_in);
            starts.push(false);
        }
    }
    (idx, starts)
}

/// Jointly resamples the rows of `series` (same indices for every column).
pub fn stationary_bootstrap(series: &DMatrix<f64>, spec: &BootstrapSpec) -> Result<BootstrapDraw> {
    if !(spec.block_prob > 0.0 && spec.block_prob <= 1.0) {
        return Err(Error::Config(format!("block probability must lie in (0, 1], got {}", spec.block_prob)));
    }
    let t = series.nrows();
    if t < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 rows to bootstrap, got {t}")));
    }
    let mut rng = stream_rng(spec.seed, 0);
    let (indices, block_starts) = stationary_indices(t, t, spec.block_prob, &mut rng);
    Ok(BootstrapDraw {
        data: series.select_rows(&indices),
        indices,
        block_starts,
    })
}
