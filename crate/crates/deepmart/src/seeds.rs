//! Deterministic seed derivation.
//!
//! Every random stream in the crate is derived from a user-facing base seed
//! through a named domain plus integer coordinates. Distinct domains can
//! never collide, which is how training and evaluation streams are kept
//! disjoint even if the user passes the same base seed for both.

use sha2::{Digest, Sha256};

/// Derive a child seed from `(base, domain, a, b)`.
pub fn derive_seed(base: u64, domain: &str, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update([0xff]);
    h.update(domain.as_bytes());
    h.update([0xfe]);
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
