//! Counter-based seed splitting.
//!
//! Every command takes one master seed; sub-seeds for utterances, training
//! shuffles, decode sessions etc. are derived by hashing (master, stream,
//! counter) so independent consumers never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams so two subsystems never collide on the same counter space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Prototypes = 1,
    Utterance = 2,
    CodebookInit = 3,
    WeightInit = 4,
    TrainOrder = 5,
    Dropout = 6,
    DecodeSession = 7,
    Sweep = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from (master, stream, counter).
pub fn derive_seed(master: u64, stream: Stream, counter: u64) -> u64 {
    let a = splitmix64(master ^ (stream as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    splitmix64(a ^ counter.wrapping_mul(0xe703_7ed1_a0b4_28db))
}

/// The crate-wide deterministic RNG.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
