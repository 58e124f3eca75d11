use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::bits::Bits;
use crate::ids::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Raw,
    Sifted,
    Reconciled,
    Secret,
}

/// One party's view of a block of key as it moves through distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBlock {
    pub block_id: u64,
    pub peer_pair: (NodeId, NodeId),
    stage: Stage,
    bits: Bits,
    qber_estimate: Option<f64>,
    bits_leaked: u64,
}

impl KeyBlock {
    pub fn new(block_id: u64, peer_pair: (NodeId, NodeId), raw: Bits) -> KeyBlock {
        KeyBlock {
            block_id,
            peer_pair,
            stage: Stage::Raw,
            bits: raw,
            qber_estimate: None,
            bits_leaked: 0,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn qber_estimate(&self) -> Option<f64> {
        self.qber_estimate
    }

    pub fn bits_leaked(&self) -> u64 {
        self.bits_leaked
    }

    pub fn set_qber_estimate(&mut self, q: f64) {
        self.qber_estimate = Some(q);
    }

    pub fn add_leakage(&mut self, bits: u64) {
        self.bits_leaked += bits;
    }

    /// Move to a later stage with new content. Entering `Secret` requires the
    /// new length to fit inside the reconciled length minus leakage.
    pub fn advance(&mut self, to: Stage, bits: Bits) -> Result<(), ProtocolError> {
        if to <= self.stage {
            return Err(ProtocolError::StageRegression { from: self.stage, to });
        }
        if to == Stage::Secret {
            let room = (self.bits.len() as u64).saturating_sub(self.bits_leaked);
            if bits.len() as u64 > room {
                return Err(ProtocolError::InvalidArgument(format!(
                    "secret length {} exceeds reconciled length {} minus leakage {}",
                    bits.len(),
                    self.bits.len(),
                    self.bits_leaked
                )));
            }
        }
        self.stage = to;
        self.bits = bits;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_only_move_forward() {
        let mut b = KeyBlock::new(1, ("A".into(), "B".into()), vec![0; 10]);
        b.advance(Stage::Sifted, vec![0; 5]).unwrap();
        assert!(matches!(
            b.advance(Stage::Raw, vec![]),
            Err(ProtocolError::StageRegression { .. })
        ));
        assert!(matches!(
            b.advance(Stage::Sifted, vec![]),
            Err(ProtocolError::StageRegression { .. })
        ));
        b.advance(Stage::Reconciled, vec![1; 5]).unwrap();
        b.add_leakage(3);
        assert!(b.advance(Stage::Secret, vec![1; 3]).is_err());
        b.advance(Stage::Secret, vec![1; 2]).unwrap();
        assert_eq!(b.stage(), Stage::Secret);
    }
}
