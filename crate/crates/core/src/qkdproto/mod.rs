//! Classical post-processing: sifting, error estimation, reconciliation,
//! entropy estimation, privacy amplification and message authentication.
//!
//! [`distill_block`] strings the stages together for one block and records
//! the public-channel transcript in the [`wire`] format.

mod auth;
mod block;
mod cascade;
mod entropy;
mod pipeline;
mod privacy;
mod qber;
mod sift;
pub mod wire;

pub use auth::{auth_tag, poly_hash, take_auth_key, verify_tag, AuthKey, AUTH_KEY_BITS, TAG_BITS};
pub use block::{KeyBlock, Stage};
pub use cascade::{reconcile_cascade, ParityDisclosure, Reconciliation, CASCADE_PASSES, MAX_QBER_HINT, MIN_CASCADE_LEN};
pub use entropy::{estimate_secret_length, multiphoton_beta, multiphoton_probability, EntropyEstimator, EstimatorKind};
pub use pipeline::{distill_block, sift, Distilled, PipelineConfig, AUTH_ROUNDS_PER_BLOCK, MIN_QBER_HINT, VERIFY_HASH_BITS};
pub use privacy::{privacy_amplify, toeplitz_seed_len};
pub use qber::{estimate_qber, estimate_qber_with_min, QberSample, MIN_QBER_SAMPLE};
pub use sift::{sarg_outcome, sift_bb84, sift_sarg, Sifted, Sifting};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("detection record is for frame {rx}, pulse frame is {tx}")]
    FrameMismatch { tx: u64, rx: u64 },
    #[error("detection at slot {slot} is outside a {len}-slot frame")]
    SlotOutOfRange { slot: u64, len: usize },
    #[error("bit strings differ in length ({alice} vs {bob})")]
    LengthMismatch { alice: usize, bob: usize },
    #[error("QBER sample of {sample} bits is below the minimum of {min}")]
    InsufficientSample { sample: usize, min: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("reconciliation unsupported for {len} bits at qber hint {qber_hint}")]
    UnsupportedRegime { qber_hint: f64, len: usize },
    #[error("reconciliation failed verification after leaking {leaked} bits")]
    ReconciliationFailed { leaked: u64 },
    #[error("cannot extract {target} bits from a {len}-bit key")]
    InvalidRequest { target: usize, len: usize },
    #[error("authentication key exhausted: need {requested} bits, {available} available")]
    AuthStarvation { requested: u64, available: u64 },
    #[error("authentication tag mismatch")]
    AuthFailure,
    #[error("key block cannot move from {from:?} to {to:?}")]
    StageRegression { from: Stage, to: Stage },
    #[error(transparent)]
    Wire(#[from] wire::WireError),
}
