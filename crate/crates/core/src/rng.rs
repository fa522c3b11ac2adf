//! Counter-based substreams.
//!
//! Every random draw in the crate comes from a generator keyed by the run seed
//! and a tuple of integer tags (particle index, step, purpose). Results are
//! therefore independent of evaluation order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

pub mod tag {
    pub const INIT: u64 = 0x696e_6974;
    pub const DIFFUSION: u64 = 0x6469_6666;
    pub const SCORE_NOISE: u64 = 0x7363_6f72;
    pub const PAIRS: u64 = 0x7061_6972;
    pub const MIXTURE: u64 = 0x6d69_7874;
    pub const ORACLE_MC: u64 = 0x6f72_6163;
    pub const FEATURES: u64 = 0x6665_6174;
    pub const PROJECTIONS: u64 = 0x7072_6f6a;
    pub const EVAL: u64 = 0x6576_616c;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the substream identified by `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit hash of a slice of floats by bit pattern.
pub fn hash_f64s(xs: &[f64]) -> u64 {
    xs.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, x| splitmix64(h ^ x.to_bits()))
}

pub fn normal(rng: &mut Stream) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Stream, d: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_fn(d, |_, _| normal(rng))
}
