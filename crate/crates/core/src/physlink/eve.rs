use serde::{Deserialize, Serialize};

use super::PhysError;

/// Eavesdropper on the quantum channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EveModel {
    #[default]
    None,
    /// Measure a `fraction` of non-empty pulses in a uniformly random BB84
    /// basis and resend the result with the same photon number.
    InterceptResend { fraction: f64 },
    /// Keep one photon from every multi-photon pulse, forward the rest over
    /// a lossless line, and block single-photon pulses so that the receiver's
    /// click probability matches the honest channel's.
    PhotonNumberSplit,
}

impl EveModel {
    pub fn validate(&self) -> Result<(), PhysError> {
        match *self {
            EveModel::InterceptResend { fraction } if !(0.0..=1.0).contains(&fraction) => {
                Err(PhysError::InvalidEve(format!("intercept fraction {fraction} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, EveModel::None | EveModel::InterceptResend { fraction: 0.0 })
    }
}

/// Photon-number-splitting strategy: block a fraction of single-photon
/// pulses and forward the remaining photons of multi-photon pulses (one kept)
/// with per-photon transmittance `fwd`, chosen so the receiver's signal
/// click probability equals the honest `1 - exp(-mu * t * eta)`. Blocking
/// singles takes priority; if multi-photon pulses alone overshoot, `fwd`
/// drops below 1.
///
/// Returns `(block_prob, fwd)`.
pub(crate) fn pns_strategy(mu: f64, honest_transmittance: f64, eta: f64) -> (f64, f64) {
    let target = 1.0 - (-mu * honest_transmittance * eta).exp();
    if target <= 0.0 {
        return (1.0, 0.0);
    }
    let p1 = mu * (-mu).exp();
    let multi = |fwd: f64| multi_click(mu, fwd * eta);
    let full = multi(1.0);
    if full >= target {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if multi(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (1.0, 0.5 * (lo + hi))
    } else {
        let block = 1.0 - (target - full) / (p1 * eta);
        (block.clamp(0.0, 1.0), 1.0)
    }
}

/// Click probability from multi-photon pulses forwarded minus one photon,
/// each remaining photon detected with probability `q`.
pub(crate) fn multi_click(mu: f64, q: f64) -> f64 {
    let mut pn = (-mu).exp();
    let mut sum = 0.0;
    let mut mass = pn;
    for n in 1..500u32 {
        pn *= mu / f64::from(n);
        mass += pn;
        if n >= 2 {
            sum += pn * (1.0 - (1.0 - q).powi(n as i32 - 1));
        }
        if 1.0 - mass < 1e-17 && n >= 2 {
            break;
        }
    }
    sum
}
