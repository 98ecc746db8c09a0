//! Deterministic per-purpose random streams.
//!
//! Every random draw in the crate comes from a stream keyed by a base seed and
//! two indices (for example iteration and trajectory), so results never depend
//! on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with two indices into a new 64-bit seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(32))
}

pub fn stream(seed: u64, a: u64, b: u64) -> StreamRng {
    let mut bytes = [0u8; 32];
    let mut s = derive_seed(seed, a, b);
    for chunk in bytes.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}
