//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by the run seed plus a path of stream labels, so results do not
//! depend on thread scheduling or call order across streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, path: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream labels.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const PRETRAIN_EPOCH: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const INFER_TRAIN: u64 = 4;
    pub const INFER_INIT: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
}
