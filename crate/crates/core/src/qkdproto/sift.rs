use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::bits::Bits;
use crate::physlink::{DetectionRecord, PulseFrame};
use crate::rng;

/// Which sifting protocol a link runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sifting {
    #[default]
    Bb84,
    Sarg,
}

/// Output of sifting one frame. Both parties derive `kept` from the public
/// announcements, so it is shared.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sifted {
    pub alice: Bits,
    pub bob: Bits,
    /// Slot indices kept, ascending.
    pub kept: Vec<u64>,
}

impl Sifted {
    pub fn len(&self) -> usize {
        self.alice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice.is_empty()
    }

    /// Append another frame's sifted output.
    pub fn extend(&mut self, other: Sifted) {
        self.alice.extend(other.alice);
        self.bob.extend(other.bob);
        self.kept.extend(other.kept);
    }
}

fn check(tx: &PulseFrame, rx: &DetectionRecord) -> Result<(), ProtocolError> {
    if tx.frame_id != rx.frame_id {
        return Err(ProtocolError::FrameMismatch {
            tx: tx.frame_id,
            rx: rx.frame_id,
        });
    }
    if let Some(bad) = rx.events.iter().find(|e| e.slot as usize >= tx.len()) {
        return Err(ProtocolError::SlotOutOfRange {
            slot: bad.slot,
            len: tx.len(),
        });
    }
    Ok(())
}

/// Standard sifting: Bob announces the slot and basis of each detection,
/// Alice confirms which bases matched.
pub fn sift_bb84(tx: &PulseFrame, rx: &DetectionRecord) -> Result<Sifted, ProtocolError> {
    check(tx, rx)?;
    let mut out = Sifted::default();
    for e in &rx.events {
        let (basis, value) = tx.slot(e.slot as usize);
        if basis == e.rx_basis {
            out.alice.push(value);
            out.bob.push(e.rx_value);
            out.kept.push(e.slot);
        }
    }
    Ok(out)
}

/// Bob's reading of one SARG announcement. Alice announces her state
/// `(basis, value)` together with a decoy `(1 - basis, decoy)`; the key bit
/// is which of the two she sent, encoded as its basis. Bob's outcome in
/// basis `rx_basis` is conclusive when it contradicts the announced state in
/// that basis, and then names the other one.
///
/// Returns Bob's key bit, or `None` for an inconclusive outcome.
pub fn sarg_outcome(basis: u8, value: u8, decoy: u8, rx_basis: u8, rx_value: u8) -> Option<u8> {
    let expected = if rx_basis == basis { value } else { decoy };
    (rx_value != expected).then_some(1 - rx_basis)
}

/// Two-state sifting robust to photon-number splitting. Alice's key bit per
/// kept slot is her basis; decoy values are drawn from `decoy_seed`, one per
/// detected slot in event order.
pub fn sift_sarg(tx: &PulseFrame, rx: &DetectionRecord, decoy_seed: u64) -> Result<Sifted, ProtocolError> {
    check(tx, rx)?;
    let mut r = rng::rng(decoy_seed);
    let mut out = Sifted::default();
    for e in &rx.events {
        let (basis, value) = tx.slot(e.slot as usize);
        let decoy: u8 = r.random_range(0..2);
        if let Some(bit) = sarg_outcome(basis, value, decoy, e.rx_basis, e.rx_value) {
            out.alice.push(basis);
            out.bob.push(bit);
            out.kept.push(e.slot);
        }
    }
    Ok(out)
}
