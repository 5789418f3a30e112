//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by a
//! `(seed, stream)` pair, so any individual tensor or step can be regenerated
//! without replaying the draws that came before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// FNV-1a over the UTF-8 bytes; maps parameter names to stream ids.
pub fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `len` draws from U[-bound, bound].
pub fn uniform(seed: u64, stream_id: u64, len: usize, bound: f32) -> Vec<f32> {
    let mut rng = stream(seed, stream_id);
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// `len` standard normal draws.
pub fn normal(seed: u64, stream_id: u64, len: usize) -> Vec<f32> {
    let mut rng = stream(seed, stream_id);
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}
