use serde::{Deserialize, Serialize};

use super::Sifting;
use crate::bits::binary_entropy;
use crate::physlink::{click_probability, LinkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    SimpleShannon,
    /// Only credits detections that single-photon pulses must account for.
    MultiphotonAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntropyEstimator {
    pub kind: EstimatorKind,
    pub security_margin_bits: u64,
}

impl Default for EntropyEstimator {
    fn default() -> Self {
        EntropyEstimator {
            kind: EstimatorKind::SimpleShannon,
            security_margin_bits: 128,
        }
    }
}

impl EntropyEstimator {
    pub fn new(kind: EstimatorKind) -> Self {
        EntropyEstimator { kind, ..Self::default() }
    }

    pub fn with_margin(mut self, bits: u64) -> Self {
        self.security_margin_bits = bits;
        self
    }
}

/// Probability that a pulse carries enough photons for an eavesdropper to
/// split off a copy she can exploit: two or more under BB84, three or more
/// under SARG (a two-photon pulse no longer reveals the bit there).
pub fn multiphoton_probability(mu: f64, sifting: Sifting) -> f64 {
    let e = (-mu).exp();
    match sifting {
        Sifting::Bb84 => 1.0 - e * (1.0 + mu),
        Sifting::Sarg => 1.0 - e * (1.0 + mu + mu * mu / 2.0),
    }
}

/// Fraction of detections that cannot be explained by multi-photon pulses
/// the eavesdropper could have split losslessly, clamped to `[0, 1]`.
pub fn multiphoton_beta(link: &LinkParams, sifting: Sifting) -> f64 {
    let p_click = click_probability(link);
    if p_click <= 0.0 {
        return 0.0;
    }
    let p_multi = multiphoton_probability(link.mean_photon_number, sifting);
    ((p_click - p_multi) / p_click).clamp(0.0, 1.0)
}

/// Secret bits extractable from `n` reconciled bits after `bits_leaked`
/// bits went over the public channel.
pub fn estimate_secret_length(
    est: &EntropyEstimator,
    n: u64,
    qber: f64,
    bits_leaked: u64,
    link: &LinkParams,
    sifting: Sifting,
) -> u64 {
    let q = qber.clamp(0.0, 1.0);
    let fraction = match est.kind {
        EstimatorKind::SimpleShannon => 1.0 - binary_entropy(q),
        EstimatorKind::MultiphotonAware => multiphoton_beta(link, sifting) * (1.0 - binary_entropy(q)),
    };
    let raw = (n as f64 * fraction).floor() - bits_leaked as f64 - est.security_margin_bits as f64;
    if raw <= 0.0 {
        0
    } else {
        (raw as u64).min(n.saturating_sub(bits_leaked))
    }
}
