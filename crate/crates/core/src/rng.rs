//! Counter-keyed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream selected by a
//! key tuple such as `(step, sample, pair, layer)`, so results never depend on
//! the order in which work items are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix_key(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x6a09_e667_f3bc_c909, |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// Independent stream for `key` under the run seed.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix_key(key));
    rng
}

/// Domain tags separating the uses of a stream key.
pub mod purpose {
    pub const BATCH: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const GATES: u64 = 3;
    pub const MASK: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const DECODER_INIT: u64 = 6;
    pub const SYNTH_SCENE: u64 = 7;
    pub const PIXEL_NOISE: u64 = 8;
}
