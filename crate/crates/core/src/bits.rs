//! Bit-string helpers.
//!
//! Protocol layers carry keys as `Vec<u8>` holding one bit (0 or 1) per
//! element. It is wasteful but keeps index arithmetic in Cascade and sifting
//! obvious. Hot loops (Toeplitz hashing, frame generation) pack into `u64`
//! words instead.

/// One bit per byte, values restricted to 0 and 1.
pub type Bits = Vec<u8>;

pub fn xor(a: &[u8], b: &[u8]) -> Bits {
    assert_eq!(a.len(), b.len(), "xor of unequal bit strings");
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn parity<I: IntoIterator<Item = u8>>(bits: I) -> u8 {
    bits.into_iter().fold(0, |acc, b| acc ^ b)
}

/// Pack little-endian: bit `i` lands in word `i / 64` at position `i % 64`.
pub fn pack(bits: &[u8]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        words[i / 64] |= u64::from(b & 1) << (i % 64);
    }
    words
}

pub fn unpack(words: &[u64], len: usize) -> Bits {
    (0..len).map(|i| ((words[i / 64] >> (i % 64)) & 1) as u8).collect()
}

/// MSB-first byte encoding, zero padded in the final byte.
pub fn to_bytes(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        out[i / 8] |= (b & 1) << (7 - (i % 8));
    }
    out
}

pub fn from_bytes(bytes: &[u8], len: usize) -> Bits {
    (0..len).map(|i| (bytes[i / 8] >> (7 - (i % 8))) & 1).collect()
}

/// Interpret up to 64 bits MSB-first as an integer.
pub fn to_u64(bits: &[u8]) -> u64 {
    debug_assert!(bits.len() <= 64);
    bits.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b & 1))
}

/// Render as a string of '0'/'1' characters.
pub fn to_string(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
}

/// Parse a string of '0'/'1' characters; anything else panics.
pub fn from_str(s: &str) -> Bits {
    s.chars()
        .map(|c| match c {
            '0' => 0,
            '1' => 1,
            other => panic!("not a bit: {other:?}"),
        })
        .collect()
}

/// Binary entropy h2(p) in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_roundtrip_odd_length() {
        let bits = from_str("1011001110001");
        assert_eq!(unpack(&pack(&bits), bits.len()), bits);
        assert_eq!(from_bytes(&to_bytes(&bits), bits.len()), bits);
    }

    #[test]
    fn msb_first_bytes() {
        assert_eq!(to_bytes(&from_str("10000000")), vec![0x80]);
        assert_eq!(to_u64(&from_str("1010")), 10);
    }

    #[test]
    fn entropy_reference_points() {
        assert_eq!(binary_entropy(0.0), 0.0);
        assert!((binary_entropy(0.5) - 1.0).abs() < 1e-15);
        // h2(0.03) = 0.194391...
        assert!((binary_entropy(0.03) - 0.194_391_9).abs() < 1e-6);
    }
}
