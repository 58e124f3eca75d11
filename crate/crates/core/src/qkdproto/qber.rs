use rand::seq::index;

use super::ProtocolError;
use crate::bits::Bits;
use crate::rng;

pub const MIN_QBER_SAMPLE: usize = 200;

/// Result of publicly comparing a random subset of the sifted key.
#[derive(Debug, Clone, PartialEq)]
pub struct QberSample {
    pub qber: f64,
    pub alice: Bits,
    pub bob: Bits,
    /// Sampled positions in the input strings, ascending.
    pub indices: Vec<usize>,
    pub disclosed: u64,
}

pub fn estimate_qber(alice: &[u8], bob: &[u8], sample_fraction: f64, seed: u64) -> Result<QberSample, ProtocolError> {
    estimate_qber_with_min(alice, bob, sample_fraction, seed, MIN_QBER_SAMPLE)
}

/// Sample `round(n * sample_fraction)` positions, compare them and drop them
/// from both strings.
pub fn estimate_qber_with_min(
    alice: &[u8],
    bob: &[u8],
    sample_fraction: f64,
    seed: u64,
    min_sample: usize,
) -> Result<QberSample, ProtocolError> {
    if alice.len() != bob.len() {
        return Err(ProtocolError::LengthMismatch {
            alice: alice.len(),
            bob: bob.len(),
        });
    }
    if !(sample_fraction > 0.0 && sample_fraction < 1.0) {
        return Err(ProtocolError::InvalidArgument(format!(
            "sample fraction {sample_fraction} not in (0, 1)"
        )));
    }
    let n = alice.len();
    let k = (n as f64 * sample_fraction).round() as usize;
    if k < min_sample.max(1) {
        return Err(ProtocolError::InsufficientSample {
            sample: k,
            min: min_sample,
        });
    }
    let mut indices = index::sample(&mut rng::rng(seed), n, k).into_vec();
    indices.sort_unstable();
    let mut sampled = vec![false; n];
    let mut errors = 0usize;
    for &i in &indices {
        sampled[i] = true;
        errors += (alice[i] != bob[i]) as usize;
    }
    let keep = |s: &[u8]| s.iter().zip(&sampled).filter(|(_, &x)| !x).map(|(&b, _)| b).collect::<Bits>();
    Ok(QberSample {
        qber: errors as f64 / k as f64,
        alice: keep(alice),
        bob: keep(bob),
        indices,
        disclosed: k as u64,
    })
}
