//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, purpose, index)`: the triple is the
//! ChaCha key, so a value never depends on how many other values were drawn
//! before it or in which order callers ask for them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    EnsembleA = 1,
    EnsembleB = 2,
    Input = 3,
    InitialState = 4,
    Mode = 5,
    Noise = 6,
    ColumnSelect = 7,
    ClosedLoopSwitching = 8,
    ClosedLoopInitial = 9,
    Episode = 10,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"rddc-rng");
    ChaCha8Rng::from_seed(key)
}

/// Derive an independent child seed, e.g. one per episode or per trial.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    stream(seed, purpose, index).gen()
}

/// `count` draws from `Uniform(lo, hi)` on the stream `(seed, purpose, index)`.
pub fn uniform_vec(seed: u64, purpose: Purpose, index: u64, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream(seed, purpose, index);
    (0..count)
        .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
        .collect()
}
