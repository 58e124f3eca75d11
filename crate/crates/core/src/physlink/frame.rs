use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::PhysError;

/// Transmitter's per-slot basis and value choices.
///
/// Stored packed, one bit per slot in each of two word vectors, because data
/// frames run to millions of slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PulseFrame {
    pub frame_id: u64,
    /// Training frames carry publicly known bits for phase feedback.
    pub is_training: bool,
    len: usize,
    bases: Vec<u64>,
    values: Vec<u64>,
}

impl PulseFrame {
    /// Uniformly random bases and values.
    pub fn random<R: RngCore>(frame_id: u64, len: usize, is_training: bool, rng: &mut R) -> PulseFrame {
        assert!(len > 0, "pulse frame must contain at least one slot");
        let words = len.div_ceil(64);
        let mut bases = Vec::with_capacity(words);
        let mut values = Vec::with_capacity(words);
        for _ in 0..words {
            bases.push(rng.next_u64());
            values.push(rng.next_u64());
        }
        let tail = len % 64;
        if tail != 0 {
            let mask = (1u64 << tail) - 1;
            bases[words - 1] &= mask;
            values[words - 1] &= mask;
        }
        PulseFrame {
            frame_id,
            is_training,
            len,
            bases,
            values,
        }
    }

    pub fn from_slots(frame_id: u64, slots: &[(u8, u8)], is_training: bool) -> Result<PulseFrame, PhysError> {
        if slots.is_empty() {
            return Err(PhysError::EmptyFrame);
        }
        let words = slots.len().div_ceil(64);
        let mut bases = vec![0u64; words];
        let mut values = vec![0u64; words];
        for (i, &(b, v)) in slots.iter().enumerate() {
            if b > 1 || v > 1 {
                return Err(PhysError::InvalidParam {
                    field: "slots",
                    reason: format!("slot {i} has non-bit basis/value ({b}, {v})"),
                });
            }
            bases[i / 64] |= u64::from(b) << (i % 64);
            values[i / 64] |= u64::from(v) << (i % 64);
        }
        Ok(PulseFrame {
            frame_id,
            is_training,
            len: slots.len(),
            bases,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn basis(&self, slot: usize) -> u8 {
        assert!(slot < self.len, "slot {slot} out of range");
        ((self.bases[slot / 64] >> (slot % 64)) & 1) as u8
    }

    pub fn value(&self, slot: usize) -> u8 {
        assert!(slot < self.len, "slot {slot} out of range");
        ((self.values[slot / 64] >> (slot % 64)) & 1) as u8
    }

    pub fn slot(&self, slot: usize) -> (u8, u8) {
        (self.basis(slot), self.value(slot))
    }
}

/// One click as seen by the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub slot: u64,
    pub rx_basis: u8,
    pub rx_value: u8,
    is_dark: bool,
    eve_knows: bool,
}

impl Detection {
    pub fn new(slot: u64, rx_basis: u8, rx_value: u8) -> Detection {
        Detection {
            slot,
            rx_basis,
            rx_value,
            is_dark: false,
            eve_knows: false,
        }
    }

    pub(crate) fn with_truth(mut self, is_dark: bool, eve_knows: bool) -> Detection {
        self.is_dark = is_dark;
        self.eve_knows = eve_knows;
        self
    }
}

/// Receiver's per-slot click outcomes for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionRecord {
    pub frame_id: u64,
    pub events: Vec<Detection>,
    /// Gates where both detectors fired; discarded, but they still start a
    /// dead-time window.
    pub double_clicks: u64,
    slots: u64,
    multiphoton_emissions: u64,
}

/// Simulator-only knowledge about a record: which clicks were dark counts,
/// which bits the eavesdropper learned, how many multi-photon pulses left
/// the source. Never consumed by protocol code.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    record: &'a DetectionRecord,
}

impl<'a> GroundTruth<'a> {
    pub fn dark_events(&self) -> usize {
        self.record.events.iter().filter(|e| e.is_dark).count()
    }

    pub fn is_dark(&self, event: usize) -> bool {
        self.record.events[event].is_dark
    }

    pub fn eve_knows(&self, event: usize) -> bool {
        self.record.events[event].eve_knows
    }

    pub fn eve_known_events(&self) -> usize {
        self.record.events.iter().filter(|e| e.eve_knows).count()
    }

    pub fn multiphoton_emissions(&self) -> u64 {
        self.record.multiphoton_emissions
    }
}

impl DetectionRecord {
    pub fn new(frame_id: u64, slots: u64, events: Vec<Detection>) -> DetectionRecord {
        DetectionRecord {
            frame_id,
            events,
            double_clicks: 0,
            slots,
            multiphoton_emissions: 0,
        }
    }

    pub(crate) fn from_parts(
        frame_id: u64,
        slots: u64,
        events: Vec<Detection>,
        double_clicks: u64,
        multiphoton_emissions: u64,
    ) -> DetectionRecord {
        DetectionRecord {
            frame_id,
            events,
            double_clicks,
            slots,
            multiphoton_emissions,
        }
    }

    /// Number of gated slots the record covers.
    pub fn slots(&self) -> u64 {
        self.slots
    }

    pub fn truth(&self) -> GroundTruth<'_> {
        GroundTruth { record: self }
    }

    /// Smallest slot gap between consecutive events, if there are two or more.
    pub fn min_gap(&self) -> Option<u64> {
        self.events.windows(2).map(|w| w[1].slot - w[0].slot).min()
    }
}
