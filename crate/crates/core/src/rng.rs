//! Seed plumbing. Every random draw in the crate flows through a ChaCha
//! generator seeded from a `(root seed, label)` pair so that independent
//! components (patients, epochs, bootstrap rounds) get independent,
//! reproducible streams regardless of evaluation order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// FNV-1a over a byte slice. Used for seed derivation and config hashing;
/// stable across platforms and toolchain versions, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a stream seed from a root seed and a textual label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + label.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    fnv1a(&buf)
}

pub fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, label: &str) -> ChaCha20Rng {
    seeded(derive_seed(seed, label))
}

/// Standard normal draw via Box-Muller; avoids pulling in a distributions
/// crate for the one place a gaussian is needed.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // gen::<f64>() yields [0, 1); shift to (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
