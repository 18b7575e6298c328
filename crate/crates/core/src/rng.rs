//! Named random sub-streams derived from one top-level seed.
//!
//! Every stage draws from its own stream so that toggling one stage never
//! perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

/// Well-known stream names.
pub mod streams {
    pub const SYNTH: &str = "synth";
    pub const RETRIEVAL: &str = "retrieval";
    pub const SPLIT: &str = "split";
    pub const NOISE: &str = "noise";
    pub const SAMPLER: &str = "sampler";
    pub const INIT: &str = "init";
    pub const MODEL_INIT: &str = "model-init";
    pub const TRAIN_ORDER: &str = "train-order";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of the named stream.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    mix(seed ^ mix(fnv1a(name.as_bytes())))
}

/// Open the named stream.
pub fn stream(seed: u64, name: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name))
}

/// Open a stream further keyed by an index (one stream per record, per round...).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(mix(stream_seed(seed, name) ^ mix(index)))
}
