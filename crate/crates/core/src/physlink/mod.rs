//! Weak-coherent BB84 link at pulse-slot granularity.
//!
//! The source emits Poisson-distributed photon numbers, the channel thins
//! them by the total transmittance, and a pair of gated detectors with dark
//! counts and a shared dead time produce a [`DetectionRecord`]. An optional
//! eavesdropper sits on the channel. Interferometer phase mismatch adds a
//! bit-flip probability on matched-basis detections and is corrected from
//! training frames.

mod eve;
mod frame;
mod params;
mod phase;
mod transmit;

pub use eve::EveModel;
pub use frame::{Detection, DetectionRecord, GroundTruth, PulseFrame};
pub use params::{click_probability, LinkParams, DATA_WAVELENGTH_NM, SYNC_OFFSET_NS, SYNC_WAVELENGTH_NM};
pub use phase::{advance_phase, apply_training_feedback, estimate_phase_magnitude, wrap_phase, Feedback, PhaseState};
pub use transmit::{training_qber, transmit_frame, transmit_frame_with_limit, DEFAULT_MAX_FRAME_SLOTS};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysError {
    #[error("invalid link parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("pulse frame must contain at least one slot")]
    EmptyFrame,
    #[error("pulse frame has {slots} slots, per-frame limit is {limit}")]
    FrameTooLarge { slots: usize, limit: usize },
    #[error("invalid eavesdropper model: {0}")]
    InvalidEve(String),
    #[error("invalid phase state: {0}")]
    InvalidPhase(String),
}
