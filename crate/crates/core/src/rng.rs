//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! 64-bit seed and a stream id. ChaCha is counter based, so each
//! `(seed, stream)` pair is an independent sequence and the values a reservoir
//! sees never depend on the order in which reservoirs are built or trained.
//!
//! Reservoir seeds are derived from the run's master seed with
//! [`reservoir_seed`], which folds in the layer level and tile index. Within a
//! reservoir the matrix role picks the stream:
//!
//! | role                  | stream |
//! |-----------------------|--------|
//! | recurrent matrix `W`  | 1      |
//! | input matrix `W_in`   | 2      |
//! | training input noise  | 3      |
//!
//! Synthetic data generation uses stream 16 and up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    Recurrent = 1,
    Input = 2,
    TrainingNoise = 3,
    SynthChaos = 16,
    SynthAux = 17,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the reservoir at `(level, tile)` under `master_seed`.
pub fn reservoir_seed(master_seed: u64, level: usize, tile: usize) -> u64 {
    let h = mix64(master_seed ^ 0x5852_5343_0000_0000);
    let h = mix64(h ^ (level as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    mix64(h ^ (tile as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

pub fn stream(seed: u64, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role as u64);
    rng
}
