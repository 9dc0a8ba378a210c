//! Seedable random streams and the samplers used by the particle solver.
//!
//! Every draw is addressed by `(master seed, stream id, draw index)`. Stream
//! ids are derived by hashing a role tag together with the step and block
//! indices, so the sequence seen by any block of agents does not depend on how
//! blocks are scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{BackgroundSpec, KnowledgeParams, TradeParams};

/// Role tags mixed into stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamRole {
    Init = 1,
    Knowledge = 2,
    Pairing = 3,
    Trade = 4,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("cannot draw {count} disjoint pairs from {n} agents")]
    TooManyPairs { n: usize, count: usize },
    #[error("population of {0} agents does not fit 32-bit indices")]
    PopulationTooLarge(usize),
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream id for `(role, step, index)`.
pub fn stream_id(role: StreamRole, step: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(role as u64) ^ step) ^ index)
}

/// A ChaCha8 keystream selected by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn for_role(seed: u64, role: StreamRole, step: u64, index: u64) -> Self {
        Self::new(seed, stream_id(role, step, index))
    }

    /// Position the stream at draw index `index` (counted in 64-bit words).
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(2 * index as u128);
    }

    /// Uniform on the open interval (0, 1), from the top 53 bits of one word.
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * SCALE
    }

    /// A fair coin from the top bit of one word.
    #[inline]
    pub fn coin(&mut self) -> bool {
        self.rng.next_u64() >> 63 == 1
    }

    /// Symmetric two-point draw `±amplitude`.
    #[inline]
    pub fn two_point(&mut self, amplitude: f64) -> f64 {
        if self.coin() {
            amplitude
        } else {
            -amplitude
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Draw `z` from the background law by inverse transform.
#[inline]
pub fn sample_background(spec: &BackgroundSpec, rng: &mut RngStream) -> f64 {
    match *spec {
        BackgroundSpec::Uniform { upper } => upper * rng.uniform_open(),
        BackgroundSpec::PointMass { value } => value,
    }
}

/// κ = ±√δ with equal probability.
#[inline]
pub fn sample_kappa(kp: &KnowledgeParams, rng: &mut RngStream) -> f64 {
    rng.two_point(kp.kappa_amplitude())
}

/// η = ±r with equal probability.
#[inline]
pub fn sample_eta(tp: &TradeParams, rng: &mut RngStream) -> f64 {
    rng.two_point(tp.risk)
}

/// Draw `count` disjoint index pairs out of `0..n`.
///
/// The `2 * count` indices are a uniformly random ordered sample without
/// replacement; consecutive entries form a pair.
pub fn sample_disjoint_pairs(
    n: usize,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<(u32, u32)>, SamplingError> {
    if n > u32::MAX as usize {
        return Err(SamplingError::PopulationTooLarge(n));
    }
    if count.checked_mul(2).is_none_or(|k| k > n) {
        return Err(SamplingError::TooManyPairs { n, count });
    }
    let picked = rand::seq::index::sample(rng, n, 2 * count);
    let mut pairs = Vec::with_capacity(count);
    let mut it = picked.iter();
    while let (Some(a), Some(b)) = (it.next(), it.next()) {
        pairs.push((a as u32, b as u32));
    }
    Ok(pairs)
}
