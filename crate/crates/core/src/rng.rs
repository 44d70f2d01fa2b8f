//! Deterministic seed derivation. Every random stream in the pipeline is
//! derived from the run seed plus a stream tag and an index, so serial and
//! parallel execution draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags.
pub mod stream {
    pub const SYNTH_IMAGE: u64 = 1;
    pub const DETECTOR_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const PSEUDO: u64 = 4;
    pub const PROXY_INIT: u64 = 5;
    pub const PROXY_SHUFFLE: u64 = 6;
    pub const PROXY_SPLIT: u64 = 7;
    pub const CLUSTERS: u64 = 8;
    pub const CROP_JITTER: u64 = 9;
    /// Pipeline-level seeds for datasets, proxy and detector runs.
    pub const RUN_DATA: u64 = 10;
    pub const RUN_PROXY: u64 = 11;
    pub const RUN_TRAIN: u64 = 12;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream) ^ index)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream, index))
}
