//! Collatz step counting over arbitrary-precision naturals.

use num_bigint::BigUint;

use super::ItemError;

/// Parses a canonical decimal natural: ASCII digits, no sign, no leading zeros.
pub fn parse_natural(text: &str) -> Result<BigUint, ItemError> {
    let canonical =
        !text.is_empty() && text.bytes().all(|b| b.is_ascii_digit()) && (text == "0" || !text.starts_with('0'));
    if !canonical {
        return Err(ItemError::new(format!("malformed decimal natural {text:?}")));
    }
    BigUint::parse_bytes(text.as_bytes(), 10)
        .ok_or_else(|| ItemError::new(format!("malformed decimal natural {text:?}")))
}

/// Number of `n -> 3n+1` (odd) and `n -> n/2` (even) steps until `n` reaches 1.
/// Every step is counted; there is no `(3n+1)/2` shortcut.
pub fn collatz_steps(start: &BigUint) -> Result<u64, ItemError> {
    if start.bits() == 0 {
        return Err(ItemError::new("collatz is undefined for 0"));
    }
    let mut n = start.clone();
    let mut steps = 0u64;
    loop {
        let zeros = n.trailing_zeros().unwrap_or(0);
        if zeros > 0 {
            n >>= zeros;
            steps += zeros;
        }
        if n.bits() == 1 {
            return Ok(steps);
        }
        n *= 3u32;
        n += 1u32;
        steps += 1;
    }
}
