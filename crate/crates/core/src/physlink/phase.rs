use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PhysError;
use crate::rng;

/// Transmitter/receiver interferometer phase mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    /// Wrapped to (-pi, pi].
    pub phase_error_rad: f64,
    /// Random-walk intensity in rad/sqrt(s).
    pub drift_rate_rad_per_s: f64,
    /// Fraction of the estimated error removed per correction, in (0, 1].
    pub feedback_gain: f64,
}

impl Default for PhaseState {
    fn default() -> Self {
        PhaseState {
            phase_error_rad: 0.0,
            drift_rate_rad_per_s: 0.02,
            feedback_gain: 0.5,
        }
    }
}

impl PhaseState {
    pub fn new(phase_error_rad: f64, drift_rate_rad_per_s: f64, feedback_gain: f64) -> Result<PhaseState, PhysError> {
        let s = PhaseState {
            phase_error_rad: wrap_phase(phase_error_rad),
            drift_rate_rad_per_s,
            feedback_gain,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PhysError> {
        if !(self.feedback_gain > 0.0 && self.feedback_gain <= 1.0) {
            return Err(PhysError::InvalidPhase(format!(
                "feedback gain {} outside (0, 1]",
                self.feedback_gain
            )));
        }
        if !(self.drift_rate_rad_per_s.is_finite() && self.drift_rate_rad_per_s >= 0.0) {
            return Err(PhysError::InvalidPhase(format!(
                "drift rate {} must be >= 0",
                self.drift_rate_rad_per_s
            )));
        }
        if !self.phase_error_rad.is_finite() {
            return Err(PhysError::InvalidPhase("phase error must be finite".into()));
        }
        Ok(())
    }

    /// Bit-flip contribution on matched-basis detections.
    pub fn flip_probability(&self) -> f64 {
        (1.0 - self.phase_error_rad.cos()) / 2.0
    }

    pub fn with_error(self, phase_error_rad: f64) -> PhaseState {
        PhaseState {
            phase_error_rad: wrap_phase(phase_error_rad),
            ..self
        }
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_phase(x: f64) -> f64 {
    if x > -PI && x <= PI {
        return x;
    }
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        PI
    } else {
        y
    }
}

/// Random-walk the phase error over `dt_s` seconds.
pub fn advance_phase(phase: &PhaseState, dt_s: f64, rng_seed: u64) -> PhaseState {
    assert!(dt_s >= 0.0, "negative time step {dt_s}");
    let sigma = phase.drift_rate_rad_per_s * dt_s.sqrt();
    if sigma == 0.0 {
        return *phase;
    }
    let step = Normal::new(0.0, sigma).expect("finite sigma").sample(&mut rng::rng(rng_seed));
    phase.with_error(phase.phase_error_rad + step)
}

/// Invert the error model: |phase error| implied by a training QBER reading
/// above the calibrated floor. Capped at pi/2 (a reading of 0.5 or worse).
pub fn estimate_phase_magnitude(training_qber: f64, qber_floor: f64) -> f64 {
    let excess = (training_qber - qber_floor).clamp(0.0, 0.5);
    (1.0 - 2.0 * excess).clamp(-1.0, 1.0).acos()
}

/// Result of one feedback step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub phase: PhaseState,
    /// Training QBER observed at the chosen phase.
    pub qber: f64,
    /// Training frames spent on probing.
    pub probes: u32,
}

/// Phase-correcting feedback from a training-frame reading.
///
/// The magnitude of the error comes from the inverse error model; its sign is
/// unknown, so both candidate corrections are tried with `probe` (which runs
/// a training frame at the candidate phase error and returns its QBER) and
/// the better one is kept. If neither beats the current reading the phase is
/// left alone.
pub fn apply_training_feedback<F>(phase: &PhaseState, training_qber: f64, qber_floor: f64, mut probe: F) -> Feedback
where
    F: FnMut(f64) -> f64,
{
    let magnitude = estimate_phase_magnitude(training_qber, qber_floor);
    let step = phase.feedback_gain * magnitude;
    if step == 0.0 {
        return Feedback {
            phase: *phase,
            qber: training_qber,
            probes: 0,
        };
    }
    let minus = wrap_phase(phase.phase_error_rad - step);
    let plus = wrap_phase(phase.phase_error_rad + step);
    let q_minus = probe(minus);
    let q_plus = probe(plus);
    let (best, q_best) = if q_minus <= q_plus { (minus, q_minus) } else { (plus, q_plus) };
    if q_best < training_qber {
        Feedback {
            phase: phase.with_error(best),
            qber: q_best,
            probes: 2,
        }
    } else {
        Feedback {
            phase: *phase,
            qber: training_qber,
            probes: 2,
        }
    }
}
