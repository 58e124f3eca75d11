use serde::{Deserialize, Serialize};

use super::PhysError;

/// Data laser wavelength. Informational only.
pub const DATA_WAVELENGTH_NM: f64 = 1550.12;
/// Sync/framing laser wavelength. Informational only.
pub const SYNC_WAVELENGTH_NM: f64 = 1550.92;
/// Sync pulse trails its data pulse by this much. Informational only.
pub const SYNC_OFFSET_NS: f64 = 20.0;

/// Physical parameters of one QKD link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// Pulse slots per second.
    pub pulse_rate_hz: f64,
    /// Mean photon number per pulse at the transmitter output.
    pub mean_photon_number: f64,
    /// Fiber plus splice loss. `inf` models a severed fiber.
    pub channel_loss_db: f64,
    /// Switch and coupler losses on the photonic path.
    pub insertion_loss_db: f64,
    /// Per-photon detection probability at a gated detector.
    pub detector_efficiency: f64,
    /// Dark click probability per detector per gate.
    pub dark_count_prob: f64,
    /// Detector disable interval after a click.
    pub dead_time_s: f64,
    /// Misalignment error floor on matched-basis detections.
    pub intrinsic_error: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            pulse_rate_hz: 5e6,
            mean_photon_number: 0.5,
            channel_loss_db: 0.0,
            insertion_loss_db: 0.0,
            detector_efficiency: 0.10,
            dark_count_prob: 1e-5,
            dead_time_s: 1e-5,
            intrinsic_error: 0.02,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> PhysError {
    PhysError::InvalidParam {
        field,
        reason: reason.into(),
    }
}

fn probability(field: &'static str, v: f64, max: f64) -> Result<(), PhysError> {
    if !(0.0..=max).contains(&v) {
        return Err(invalid(field, format!("{v} outside [0, {max}]")));
    }
    Ok(())
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), PhysError> {
        if !(self.pulse_rate_hz.is_finite() && self.pulse_rate_hz > 0.0) {
            return Err(invalid("pulse_rate_hz", format!("{} must be positive", self.pulse_rate_hz)));
        }
        if !(self.mean_photon_number.is_finite() && self.mean_photon_number >= 0.0) {
            return Err(invalid(
                "mean_photon_number",
                format!("{} must be >= 0", self.mean_photon_number),
            ));
        }
        for (field, v) in [
            ("channel_loss_db", self.channel_loss_db),
            ("insertion_loss_db", self.insertion_loss_db),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(invalid(field, format!("{v} must be >= 0")));
            }
        }
        probability("detector_efficiency", self.detector_efficiency, 1.0)?;
        probability("dark_count_prob", self.dark_count_prob, 1.0)?;
        probability("intrinsic_error", self.intrinsic_error, 0.5)?;
        if !(self.dead_time_s.is_finite() && self.dead_time_s >= 0.0) {
            return Err(invalid("dead_time_s", format!("{} must be >= 0", self.dead_time_s)));
        }
        Ok(())
    }

    pub fn total_loss_db(&self) -> f64 {
        self.channel_loss_db + self.insertion_loss_db
    }

    /// Total transmittance 10^(-loss/10); zero for infinite loss.
    pub fn transmittance(&self) -> f64 {
        let loss = self.total_loss_db();
        if loss.is_infinite() {
            0.0
        } else {
            10f64.powf(-loss / 10.0)
        }
    }

    /// Number of slots a click occupies: the next armed gate is `slot + dead_slots()`.
    pub fn dead_slots(&self) -> u64 {
        let slots = (self.dead_time_s * self.pulse_rate_hz - 1e-9).ceil();
        (slots.max(1.0)) as u64
    }

    /// Probability that at least one signal photon is detected in a gate.
    pub fn signal_probability(&self) -> f64 {
        -(-self.mean_photon_number * self.transmittance() * self.detector_efficiency).exp_m1()
    }

    /// Probability that either detector dark-clicks in a gate.
    pub fn dark_probability(&self) -> f64 {
        let d = self.dark_count_prob;
        1.0 - (1.0 - d) * (1.0 - d)
    }

    /// Expected honest QBER at zero phase error: the floor a receiver
    /// calibrates against when interpreting training frames.
    pub fn qber_floor(&self) -> f64 {
        let ps = self.signal_probability();
        let pd = self.dark_probability();
        if ps + pd == 0.0 {
            return 0.0;
        }
        (ps * self.intrinsic_error + 0.5 * pd) / (ps + pd)
    }

    pub fn data_wavelength_nm(&self) -> f64 {
        DATA_WAVELENGTH_NM
    }

    pub fn sync_wavelength_nm(&self) -> f64 {
        SYNC_WAVELENGTH_NM
    }

    pub fn sync_offset_ns(&self) -> f64 {
        SYNC_OFFSET_NS
    }
}

/// Probability that a gated slot produces a click on either detector.
///
/// `p = 1 - (1 - p_signal)(1 - p_dark)`, with `p_signal = 1 - exp(-mu T eta)`
/// and `p_dark` aggregating both detectors.
pub fn click_probability(params: &LinkParams) -> f64 {
    let ps = params.signal_probability();
    let pd = params.dark_probability();
    1.0 - (1.0 - ps) * (1.0 - pd)
}
