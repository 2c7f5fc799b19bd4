//! Nonce search for SHA-256 digests with a minimum number of leading zero bits.

use sha2::{Digest, Sha256};

/// Leading zero bits of a digest.
pub fn leading_zero_bits(digest: &[u8]) -> u32 {
    let mut bits = 0;
    for byte in digest {
        if *byte == 0 {
            bits += 8;
        } else {
            return bits + byte.leading_zeros();
        }
    }
    bits
}

/// SHA-256 of `block` followed by the decimal rendering of `nonce`.
pub fn digest(block: &str, nonce: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(block.as_bytes());
    hasher.update(nonce.to_string().as_bytes());
    hasher.finalize().into()
}

pub fn meets_difficulty(block: &str, nonce: u64, difficulty: u32) -> bool {
    leading_zero_bits(&digest(block, nonce)) >= difficulty
}

/// Smallest nonce in `[nonce_start, nonce_start + nonce_count)` meeting
/// `difficulty`, if any.
pub fn hashcash_search(block: &str, difficulty: u32, nonce_start: u64, nonce_count: u64) -> Option<u64> {
    let end = nonce_start.saturating_add(nonce_count);
    let mut hasher = Sha256::new();
    hasher.update(block.as_bytes());
    let mut text = String::with_capacity(20);
    (nonce_start..end).find(|nonce| {
        use std::fmt::Write;
        text.clear();
        write!(text, "{nonce}").expect("writing to a String");
        let mut h = hasher.clone();
        h.update(text.as_bytes());
        let out: [u8; 32] = h.finalize().into();
        leading_zero_bits(&out) >= difficulty
    })
}
