//! Deterministic random streams.
//!
//! Every random draw in a study derives from `(master_seed, replicate, stage,
//! sub-index)`, so results do not depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stage tags separating the independent random streams of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Data = 1,
    Dropout = 2,
    Imputation = 3,
    BootstrapGlmm = 4,
    BootstrapMi = 5,
    Source = 6,
    Analysis = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, replicate: u64, stage: Stage) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, &[replicate, stage as u64]))
}

pub fn substream(master: u64, replicate: u64, stage: Stage, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, &[replicate, stage as u64, index]))
}
