//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator whose 64-bit seed
//! is derived from a master seed and a list of stream keys with the
//! SplitMix64 finalizer. Distinct key paths give statistically independent
//! streams, so a participant's shuffle order never depends on how many
//! numbers another component has drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels, kept in one place so two subsystems never collide.
pub mod stream {
    pub const DATA: u64 = 0x0da7a;
    pub const SPLIT: u64 = 0x5911;
    pub const INIT: u64 = 0x1417;
    pub const SHUFFLE: u64 = 0x5f1e;
    pub const DROPOUT: u64 = 0xd209;
    pub const FED: u64 = 0xfed;
    pub const ATTACK: u64 = 0xa77c;
    pub const FINETUNE: u64 = 0xf17e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `keys` into `seed`, one SplitMix64 round per key.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_for(seed: u64, keys: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}
