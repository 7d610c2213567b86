//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness (device sampling, mini-batches, quantization
//! dither, fading) gets its own ChaCha stream keyed by a root seed and a path
//! of tags. Streams never depend on the order in which other streams were
//! consumed, so results do not change with the degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream tags. Distinct values keep sibling streams disjoint.
pub mod tag {
    pub const TOPOLOGY: u64 = 0x01;
    pub const FADING: u64 = 0x02;
    pub const SAMPLING: u64 = 0x03;
    pub const TRAIN_QUANT: u64 = 0x05;
    pub const UPLINK_QUANT: u64 = 0x06;
    pub const INIT: u64 = 0x07;
    pub const DATA: u64 = 0x08;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a tag path into a 64-bit child seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn substream(seed: u64, path: &[u64]) -> Stream {
    let mut key = [0u8; 32];
    let mut s = derive_seed(seed, path);
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
