use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const DEFAULT_BATCH_SIZE: usize = 16;

/// Shuffles `0..len` with a generator seeded by `(seed, epoch)` and cuts it
/// into batches of `batch_size`; the last batch may be shorter.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Degenerate("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(seed, &[3, epoch as u64]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
