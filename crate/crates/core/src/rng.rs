//! Seed splitting for reproducible parallel Monte Carlo.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from `(seed, replica, particle, role)`. Work can therefore be
//! scheduled on any number of threads, in any order, and still consume exactly
//! the same numbers. A sub-experiment (one replica, one particle) can be
//! re-run in isolation by constructing its stream directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct roles never share numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    InitialState,
    SignalNoise,
    ObservationNoise,
    Orthogonal,
    Resample,
    Bootstrap,
    Observation,
    Matrix,
    Custom(u32),
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::InitialState => 1,
            Role::SignalNoise => 2,
            Role::ObservationNoise => 3,
            Role::Orthogonal => 4,
            Role::Resample => 5,
            Role::Bootstrap => 6,
            Role::Observation => 7,
            Role::Matrix => 8,
            Role::Custom(c) => 0x100 + c as u64,
        }
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds the stream for one `(seed, replica, particle, role)` tuple.
pub fn stream(seed: u64, replica: u64, particle: u64, role: Role) -> StreamRng {
    let words = [seed, replica, particle, role.tag()];
    let mut key = [0u8; 32];
    let mut acc = 0x6a09_e667_f3bc_c908u64;
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        // Each key word depends on all four inputs.
        acc = splitmix64(acc ^ words[i]);
        let mut h = acc;
        for w in words {
            h = splitmix64(h ^ w);
        }
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard normal draw.
#[inline]
pub fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Fills `out` with independent `N(0, var)` draws.
pub fn fill_normal(rng: &mut StreamRng, var: f64, out: &mut [f64]) {
    let sd = var.sqrt();
    for v in out {
        *v = sd * normal(rng);
    }
}

/// Uniform draw on `[0, 1)`.
#[inline]
pub fn uniform(rng: &mut StreamRng) -> f64 {
    rand::Rng::random::<f64>(rng)
}
