//! One-time authentication tags: a polynomial hash over GF(2^64) keyed by a
//! secret evaluation point, masked with fresh key.

use super::ProtocolError;
use crate::bits;
use crate::keystore::{AuditLog, KeyError, KeyReservoir, Purpose};
use crate::time::SimTime;

pub const TAG_BITS: usize = 64;
/// Key consumed per tag: 64-bit hash selector plus 64-bit mask.
pub const AUTH_KEY_BITS: usize = 2 * TAG_BITS;

/// Reduction polynomial x^64 + x^4 + x^3 + x + 1.
const REDUCTION: u64 = 0x1b;

fn gf_mul(mut a: u64, mut b: u64) -> u64 {
    let mut r = 0u64;
    while b != 0 {
        if b & 1 == 1 {
            r ^= a;
        }
        b >>= 1;
        let carry = a >> 63;
        a <<= 1;
        if carry == 1 {
            a ^= REDUCTION;
        }
    }
    r
}

/// Evaluate the message polynomial at `selector`. The message is split into
/// big-endian 8-byte blocks (last one zero-padded) followed by a block
/// holding the byte length, so messages differing only in trailing zeros
/// hash differently.
pub fn poly_hash(selector: u64, message: &[u8]) -> u64 {
    let mut acc = 0u64;
    for chunk in message.chunks(8) {
        let mut block = [0u8; 8];
        block[..chunk.len()].copy_from_slice(chunk);
        acc = gf_mul(acc ^ u64::from_be_bytes(block), selector);
    }
    gf_mul(acc ^ message.len() as u64, selector)
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct AuthKey {
    selector: u64,
    mask: u64,
}

impl std::fmt::Debug for AuthKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AuthKey(..)")
    }
}

impl AuthKey {
    pub fn new(selector: u64, mask: u64) -> AuthKey {
        AuthKey { selector, mask }
    }

    /// Build from exactly [`AUTH_KEY_BITS`] key bits.
    pub fn from_bits(key: &[u8]) -> Result<AuthKey, ProtocolError> {
        if key.len() != AUTH_KEY_BITS {
            return Err(ProtocolError::InvalidArgument(format!(
                "authentication key needs {AUTH_KEY_BITS} bits, got {}",
                key.len()
            )));
        }
        Ok(AuthKey {
            selector: bits::to_u64(&key[..64]),
            mask: bits::to_u64(&key[64..]),
        })
    }
}

pub fn auth_tag(key: &AuthKey, message: &[u8]) -> u64 {
    poly_hash(key.selector, message) ^ key.mask
}

/// Constant-time comparison of a received tag against the expected one.
pub fn verify_tag(key: &AuthKey, message: &[u8], tag: u64) -> bool {
    let expected = auth_tag(key, message).to_be_bytes();
    let got = tag.to_be_bytes();
    let diff = expected.iter().zip(got.iter()).fold(0u8, |acc, (a, b)| acc | (a ^ b));
    std::hint::black_box(diff) == 0
}

/// Draw one tag's worth of key from an authentication reservoir.
pub fn take_auth_key(
    reservoir: &mut KeyReservoir,
    at: SimTime,
    context: &str,
    audit: &mut AuditLog,
) -> Result<AuthKey, ProtocolError> {
    match reservoir.consume(AUTH_KEY_BITS as u64, Purpose::Authentication, at, context, audit) {
        Ok(d) => AuthKey::from_bits(&d.bits),
        Err(KeyError::Starvation { requested, available }) => Err(ProtocolError::AuthStarvation { requested, available }),
        Err(e) => Err(ProtocolError::InvalidArgument(e.to_string())),
    }
}
