//! Seed derivation for reproducible, schedule-independent randomness.
//!
//! All randomness in the pipeline flows from one master seed. Sub-streams
//! (per user, per session, per bootstrap replicate) derive their own seed
//! from the master seed plus a label and an index, so results do not depend
//! on the order in which streams are consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a 64-bit hash. Stable across platforms and builds, unlike
/// `std::hash::DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives a sub-seed from a master seed, a stream label, and an index.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(label.len() + 16);
    buf.extend_from_slice(&master.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&buf)
}

/// A seeded generator for the derived stream `(master, label, index)`.
pub fn derived_rng(master: u64, label: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, label, index))
}
