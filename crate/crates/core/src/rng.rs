//! Seed derivation.
//!
//! Every random stream in the crate comes from one experiment seed. A stream
//! is `ChaCha8Rng::seed_from_u64(seed)` with its ChaCha stream id set to a
//! fixed counter, so streams never overlap and adding a new consumer does not
//! perturb existing ones. Counters for the built-in consumers live in
//! [`streams`]; per-item streams use [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod streams {
    pub const CORPUS: u64 = 1;
    pub const EXTRACTOR_INIT: u64 = 2;
    pub const ENCODER_INIT: u64 = 4;
    pub const ENCODER_BATCHES: u64 = 5;
    pub const GENERATOR_INIT: u64 = 6;
    pub const GENERATOR_BATCHES: u64 = 7;
    pub const DECODER_INIT: u64 = 8;
    pub const TRACING_BATCHES: u64 = 9;
    pub const CHANNEL: u64 = 10;
    pub const RESTORATION_INIT: u64 = 11;
    pub const RESTORATION_BATCHES: u64 = 12;
    pub const VOCODER_LATENT: u64 = 13;
    pub const EVALUATION: u64 = 14;
}

/// Random stream `stream` of experiment seed `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive an independent 64-bit seed for item `counter` of a stream
/// (splitmix64 finalizer over the combined words).
pub fn derive_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
