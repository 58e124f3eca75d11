//! Trusted-relay key transport.
//!
//! A source draws a fresh random key `R` and sends it to a distant node one
//! hop at a time, one-time-pad encrypted under each hop's pairwise key.
//! Every relay on the path sees `R` in the clear, which is why interior
//! nodes must be trusted. When a hop fails the session abandons the path,
//! writes off the pad already spent and starts over with a new `R`.

mod health;
mod path;
mod session;

pub use health::{detect_failure, HealthConfig, HealthTransition, LinkHealth, LinkHealthView, Telemetry};
pub use path::{find_path, hop_links};
pub use session::{HopOutcome, HopTranscript, RelaySession, SessionStatus, RELAY_AUTH_BITS};

use thiserror::Error;

use crate::ids::NodeId;
use crate::keystore::KeyError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("source and destination are both `{0}`")]
    SameEndpoints(NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("no qualifying path from {src} to {dst}")]
    NoPath { src: NodeId, dst: NodeId },
    #[error("{0} and {1} share no link")]
    NotAdjacent(NodeId, NodeId),
    #[error("session is {0:?}, not in flight")]
    NotInFlight(SessionStatus),
    #[error("secret has {got} bits, session expects {expected}")]
    SecretLength { expected: u64, got: u64 },
    #[error(transparent)]
    Key(#[from] KeyError),
}
