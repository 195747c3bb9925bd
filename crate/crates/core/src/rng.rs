//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! the run seed, so adding draws in one component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent sub-streams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Shuffle = 3,
    Dropout = 4,
    Sampler = 5,
    Budget = 6,
    Unknown = 7,
    Synth = 8,
}

/// SplitMix64 finalizer, used to decorrelate derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    mix(seed ^ mix(stream as u64))
}

pub fn stream(seed: u64, stream: Stream) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream))
}
