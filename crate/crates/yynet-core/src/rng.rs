//! Seeded RNG helpers. All stochastic pieces (init, dropout, shuffling,
//! augmentation) draw from a `ChaCha8Rng` so runs are reproducible bit for
//! bit given a seed.

use rand_core::{RngCore, SeedableRng};

pub use rand_chacha::ChaCha8Rng;

/// Deterministic RNG from a u64 seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a stream index.
pub fn derive(seed: u64, stream: u64) -> ChaCha8Rng {
    seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Uniform sample in (0, 1).
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    // 53 random mantissa bits; add half an ulp to stay away from 0.
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Standard normal sample via Box-Muller.
pub fn normal(rng: &mut impl RngCore) -> f64 {
    let u1 = uniform(rng);
    let u2 = uniform(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}
