//! Seed-stream derivation.
//!
//! Every random decision in the engine draws from a named stream derived
//! from the single run seed. Streams are independent by construction, so
//! adding or reordering consumers of one stream never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams, one per randomized subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    WhitenInit,
    RandomInit,
    KMeans,
    NegativeSampling,
    Synthetic,
    Uncertainty,
}

impl Stream {
    fn salt(self) -> u64 {
        match self {
            Stream::Split => 0x5350_4c49_5400_0001,
            Stream::WhitenInit => 0x5748_4954_4500_0002,
            Stream::RandomInit => 0x5249_4e49_5400_0003,
            Stream::KMeans => 0x4b4d_4541_4e00_0004,
            Stream::NegativeSampling => 0x4e45_4753_4d50_0005,
            Stream::Synthetic => 0x5359_4e54_4800_0006,
            Stream::Uncertainty => 0x554e_4345_5254_0007,
        }
    }
}

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable sub-seed for `(master, stream)`.
pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(master ^ stream.salt())
}

/// Deterministic generator for the given stream of a run seed.
pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}
