//! Deterministic random streams.
//!
//! Every consumer of randomness (initializers, dropout layers, frame sampling)
//! draws from its own ChaCha stream keyed by `(seed, name, counter)`, so the
//! order in which layers are built or evaluated never changes the draws.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub use rand_chacha::ChaCha8Rng as StreamRng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for the stream named `name` at step `counter` under `seed`.
pub fn stream_seed(seed: u64, name: &str, counter: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name.as_bytes())).wrapping_add(splitmix64(counter)))
}

pub fn stream(seed: u64, name: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name, counter))
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `0..n` (Lemire's multiply-shift; bias is below 2^-32 for desk sizes).
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0);
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Standard normal draw by the Box-Muller transform.
pub fn gaussian(rng: &mut impl RngCore) -> f64 {
    // 1 - u keeps the log argument in (0, 1].
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    libm_sqrt(-2.0 * libm_ln(u1)) * libm_cos(core::f64::consts::TAU * u2)
}

#[inline]
fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[inline]
fn libm_ln(x: f64) -> f64 {
    num_traits::Float::ln(x)
}

#[inline]
fn libm_cos(x: f64) -> f64 {
    num_traits::Float::cos(x)
}
