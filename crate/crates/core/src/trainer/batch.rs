use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// One epoch of shuffled batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Vec<usize>>,
    /// Samples left out because the final short batch was dropped.
    pub dropped: usize,
}

/// Shuffles `0..n` with a stream derived from `(seed, epoch)` and cuts it
/// into batches of `batch_size`. With `drop_last` the final short batch is
/// discarded, so every batch has exactly `batch_size` samples.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> Result<EpochPlan> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!("batch size {batch_size} must be in 1..={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let stream = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64 + 1);
    SeededRng::new(stream).shuffle(&mut idx);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut dropped = 0;
    if drop_last && n % batch_size != 0 {
        dropped = batches.pop().map_or(0, |b| b.len());
    }
    Ok(EpochPlan { batches, dropped })
}
