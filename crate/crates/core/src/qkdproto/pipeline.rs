use rand::Rng;
use serde::{Deserialize, Serialize};

use super::wire::{encode_all, Message, Record};
use super::{
    estimate_qber_with_min, estimate_secret_length, privacy_amplify, reconcile_cascade, sift_bb84, sift_sarg, toeplitz_seed_len,
    EntropyEstimator, KeyBlock, ProtocolError, Sifted, Sifting, Stage, MAX_QBER_HINT,
};
use crate::ids::NodeId;
use crate::physlink::{DetectionRecord, LinkParams, PulseFrame};
use crate::rng;

/// Cascade is never told to expect fewer errors than this, so a lucky
/// error-free sample still leaves some checking capacity.
pub const MIN_QBER_HINT: f64 = 0.005;
/// Size of the post-reconciliation verification hash, counted as leakage.
pub const VERIFY_HASH_BITS: u64 = 64;
/// Sift, sample, reconcile, privacy amplification.
pub const AUTH_ROUNDS_PER_BLOCK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sifting: Sifting,
    pub estimator: EntropyEstimator,
    pub qber_sample_fraction: f64,
    pub min_qber_sample: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sifting: Sifting::Bb84,
            estimator: EntropyEstimator::default(),
            qber_sample_fraction: 0.1,
            min_qber_sample: super::MIN_QBER_SAMPLE,
        }
    }
}

/// Sift one frame with the configured protocol.
pub fn sift(sifting: Sifting, tx: &PulseFrame, rx: &DetectionRecord, seed: u64) -> Result<Sifted, ProtocolError> {
    match sifting {
        Sifting::Bb84 => sift_bb84(tx, rx),
        Sifting::Sarg => sift_sarg(tx, rx, seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distilled {
    pub alice: KeyBlock,
    pub bob: KeyBlock,
    pub qber: f64,
    pub sifted_len: usize,
    pub reconciled_len: usize,
    pub bits_leaked: u64,
    /// Every public message of the block, in order, including auth tags.
    pub transcript: Vec<Record>,
}

impl Distilled {
    pub fn secret_len(&self) -> usize {
        self.alice.len()
    }
}

/// Turn one block of sifted key into secret key.
///
/// Each of the four public rounds is passed, encoded, to `authenticate`,
/// which must tag it and verify the tag on the receiving side, returning the
/// tag or an error (starvation or tag mismatch) that aborts the block.
pub fn distill_block<A>(
    cfg: &PipelineConfig,
    link: &LinkParams,
    block_id: u64,
    peers: (NodeId, NodeId),
    sifted: &Sifted,
    seed: u64,
    mut authenticate: A,
) -> Result<Distilled, ProtocolError>
where
    A: FnMut(u8, &[u8]) -> Result<u64, ProtocolError>,
{
    if sifted.alice.len() != sifted.bob.len() {
        return Err(ProtocolError::LengthMismatch {
            alice: sifted.alice.len(),
            bob: sifted.bob.len(),
        });
    }
    let mut transcript = Vec::new();
    let mut round = |n: u8, msgs: Vec<Message>, transcript: &mut Vec<Record>| -> Result<(), ProtocolError> {
        let recs: Vec<Record> = msgs.into_iter().map(|m| Record::new(block_id, m)).collect();
        let tag = authenticate(n, &encode_all(&recs))?;
        transcript.extend(recs);
        transcript.push(Record::new(block_id, Message::AuthTag { round: n, tag }));
        Ok(())
    };

    let mut alice = KeyBlock::new(block_id, peers.clone(), sifted.alice.clone());
    let mut bob = KeyBlock::new(block_id, (peers.1.clone(), peers.0.clone()), sifted.bob.clone());
    round(
        0,
        vec![Message::SiftAccept {
            kept: sifted.kept.clone(),
        }],
        &mut transcript,
    )?;

    let sample = estimate_qber_with_min(
        &sifted.alice,
        &sifted.bob,
        cfg.qber_sample_fraction,
        rng::derive(seed, 1),
        cfg.min_qber_sample,
    )?;
    let sample_bits = sample.indices.iter().map(|&i| sifted.alice[i]).collect();
    round(
        1,
        vec![Message::QberSample {
            indices: sample.indices.iter().map(|&i| i as u32).collect(),
            bits: sample_bits,
        }],
        &mut transcript,
    )?;
    for b in [&mut alice, &mut bob] {
        b.set_qber_estimate(sample.qber);
        b.add_leakage(sample.disclosed);
    }
    alice.advance(Stage::Sifted, sample.alice.clone())?;
    bob.advance(Stage::Sifted, sample.bob.clone())?;

    let hint = sample.qber.max(MIN_QBER_HINT);
    if hint > MAX_QBER_HINT {
        return Err(ProtocolError::UnsupportedRegime {
            qber_hint: hint,
            len: sample.alice.len(),
        });
    }
    let rec = reconcile_cascade(&sample.alice, &sample.bob, hint, rng::derive(seed, 2))?;
    round(
        2,
        vec![
            Message::CascadeParities {
                parities: rec.transcript.clone(),
            },
            Message::VerifyHash { hash: rec.verify_hash },
        ],
        &mut transcript,
    )?;
    for b in [&mut alice, &mut bob] {
        b.add_leakage(rec.bits_leaked + VERIFY_HASH_BITS);
    }
    alice.advance(Stage::Reconciled, sample.alice)?;
    bob.advance(Stage::Reconciled, rec.corrected)?;

    let n = alice.len();
    let leaked = alice.bits_leaked();
    let m = estimate_secret_length(&cfg.estimator, n as u64, sample.qber, leaked, link, cfg.sifting) as usize;
    let mut r = rng::rng(rng::derive(seed, 3));
    let pa_seed: Vec<u8> = (0..toeplitz_seed_len(n, m)).map(|_| r.random_range(0..2)).collect();
    let a_secret = privacy_amplify(alice.bits(), m, &pa_seed)?;
    let b_secret = privacy_amplify(bob.bits(), m, &pa_seed)?;
    round(
        3,
        vec![Message::PrivacySeed {
            target_len: m as u32,
            seed: pa_seed,
        }],
        &mut transcript,
    )?;
    alice.advance(Stage::Secret, a_secret)?;
    bob.advance(Stage::Secret, b_secret)?;

    Ok(Distilled {
        alice,
        bob,
        qber: sample.qber,
        sifted_len: sifted.len(),
        reconciled_len: n,
        bits_leaked: leaked,
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::Bits;

    #[test]
    fn noiseless_block_distills_to_matching_keys() {
        let mut r = rng::rng(1);
        let a: Bits = (0..4000).map(|_| r.random_range(0..2)).collect();
        let s = Sifted {
            alice: a.clone(),
            bob: a,
            kept: (0..4000).collect(),
        };
        let mut rounds = 0;
        let d = distill_block(
            &PipelineConfig::default(),
            &LinkParams::default(),
            9,
            ("A".into(), "B".into()),
            &s,
            5,
            |_, _| {
                rounds += 1;
                Ok(0)
            },
        )
        .unwrap();
        assert_eq!(rounds, AUTH_ROUNDS_PER_BLOCK);
        assert_eq!(d.alice.bits(), d.bob.bits());
        assert_eq!(d.alice.stage(), Stage::Secret);
        assert_eq!(d.reconciled_len, 3600);
        assert!(d.secret_len() > 2900, "{}", d.secret_len());
        assert!(d.secret_len() as u64 <= d.reconciled_len as u64 - d.bits_leaked);
    }

    #[test]
    fn auth_failure_aborts() {
        let s = Sifted {
            alice: vec![0; 3000],
            bob: vec![0; 3000],
            kept: vec![],
        };
        let res = distill_block(
            &PipelineConfig::default(),
            &LinkParams::default(),
            1,
            ("A".into(), "B".into()),
            &s,
            0,
            |round, _| {
                if round == 2 {
                    Err(ProtocolError::AuthFailure)
                } else {
                    Ok(1)
                }
            },
        );
        assert_eq!(res, Err(ProtocolError::AuthFailure));
    }
}
