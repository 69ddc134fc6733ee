//! Seeded random streams.
//!
//! There is no global generator. Every trial draws from a stream derived
//! from `(master_seed, tag, index)`, so results do not depend on thread
//! scheduling or on how many trials ran before.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Derives the child stream for trial `index` of experiment `tag`.
pub fn stream(master_seed: u64, tag: &str, index: u64) -> SimRng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    SimRng::from_seed(seed)
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Draws from `CN(0, variance)`: each real part is `N(0, variance / 2)`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
