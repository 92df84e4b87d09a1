//! Stable, platform-independent hash-derived values.
//!
//! Reproducibility across runs, machines, and versions comes from deriving
//! every "arbitrary" numeric parameter from the SHA-256 of a descriptive tag
//! string instead of from RNG state.

use sha2::{Digest, Sha256};

/// First 8 bytes of `SHA-256(tag)`, big-endian.
pub fn stable_u64(tag: &str) -> u64 {
    let digest = Sha256::digest(tag.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Maps `tag` deterministically into `[lo, hi)`.
pub fn stable_param(tag: &str, lo: f64, hi: f64) -> f64 {
    let u = stable_u64(tag) as f64 / 2f64.powi(64);
    lo + (hi - lo) * u
}

/// Hex SHA-256 of raw bytes; the content-address used for task identity.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
