//! Cascade reconciliation, run as an exchange between Alice's fixed string
//! and Bob's string being corrected.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{auth, ProtocolError};
use crate::bits::{self, Bits};
use crate::rng;

pub const CASCADE_PASSES: usize = 4;
pub const MIN_CASCADE_LEN: usize = 64;
pub const MAX_QBER_HINT: f64 = 0.15;

/// One parity Alice revealed: the XOR of her bits at permuted positions
/// `start..end` of pass `pass`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityDisclosure {
    pub pass: u8,
    pub start: u32,
    pub end: u32,
    pub parity: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconciliation {
    /// Bob's string after correction.
    pub corrected: Bits,
    /// Parities disclosed (each distinct range counted once).
    pub bits_leaked: u64,
    pub transcript: Vec<ParityDisclosure>,
    /// Block sizes per pass.
    pub block_sizes: Vec<usize>,
    pub flips: usize,
    /// Alice's whole-string verification hash.
    pub verify_hash: u64,
}

struct Pass {
    perm: Vec<u32>,
    pos: Vec<u32>,
    k: usize,
    alice: Vec<u8>,
    bob: Vec<u8>,
}

struct Session<'a> {
    alice: &'a [u8],
    bob: Bits,
    passes: Vec<Pass>,
    cache: HashMap<(u8, u32, u32), u8>,
    transcript: Vec<ParityDisclosure>,
    flips: usize,
}

impl Session<'_> {
    fn alice_parity(&mut self, p: usize, lo: usize, hi: usize) -> u8 {
        let key = (p as u8, lo as u32, hi as u32);
        if let Some(&v) = self.cache.get(&key) {
            return v;
        }
        let perm = &self.passes[p].perm;
        let v = bits::parity(perm[lo..hi].iter().map(|&i| self.alice[i as usize]));
        self.cache.insert(key, v);
        self.transcript.push(ParityDisclosure {
            pass: key.0,
            start: key.1,
            end: key.2,
            parity: v,
        });
        v
    }

    fn bob_parity(&self, p: usize, lo: usize, hi: usize) -> u8 {
        bits::parity(self.passes[p].perm[lo..hi].iter().map(|&i| self.bob[i as usize]))
    }

    /// Binary search for one error in a block of odd relative parity, flip
    /// it, and queue every block in passes `0..=upto` whose parity now
    /// disagrees.
    fn correct_block(&mut self, p: usize, blk: usize, upto: usize, pending: &mut BTreeSet<(usize, usize)>) {
        let n = self.bob.len();
        let k = self.passes[p].k;
        let (mut lo, mut hi) = (blk * k, ((blk + 1) * k).min(n));
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.alice_parity(p, lo, mid) != self.bob_parity(p, lo, mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let x = self.passes[p].perm[lo] as usize;
        self.bob[x] ^= 1;
        self.flips += 1;
        for (q, pass) in self.passes.iter_mut().enumerate().take(upto + 1) {
            let b = pass.pos[x] as usize / pass.k;
            pass.bob[b] ^= 1;
            if pass.bob[b] != pass.alice[b] {
                pending.insert((q, b));
            } else {
                pending.remove(&(q, b));
            }
        }
    }
}

/// Reconcile `bob` towards `alice` with four Cascade passes. The first pass
/// uses block size `ceil(0.73 / qber_hint)` in natural order; each later pass
/// doubles it over a fresh public permutation drawn from `seed`. Fixing an
/// error in one pass re-opens the blocks containing that bit in earlier
/// passes. A final 64-bit hash comparison catches residual errors.
pub fn reconcile_cascade(alice: &[u8], bob: &[u8], qber_hint: f64, seed: u64) -> Result<Reconciliation, ProtocolError> {
    let n = alice.len();
    if n != bob.len() {
        return Err(ProtocolError::LengthMismatch {
            alice: n,
            bob: bob.len(),
        });
    }
    if n < MIN_CASCADE_LEN || !(qber_hint > 0.0 && qber_hint <= MAX_QBER_HINT) {
        return Err(ProtocolError::UnsupportedRegime { qber_hint, len: n });
    }
    let k1 = ((0.73 / qber_hint).ceil() as usize).clamp(1, n);
    let mut s = Session {
        alice,
        bob: bob.to_vec(),
        passes: Vec::with_capacity(CASCADE_PASSES),
        cache: HashMap::new(),
        transcript: Vec::new(),
        flips: 0,
    };
    let mut r = rng::rng(seed);
    let mut pending = BTreeSet::new();
    for p in 0..CASCADE_PASSES {
        let k = (k1 << p).min(n);
        let mut perm: Vec<u32> = (0..n as u32).collect();
        if p > 0 {
            perm.shuffle(&mut r);
        }
        let mut pos = vec![0u32; n];
        for (j, &i) in perm.iter().enumerate() {
            pos[i as usize] = j as u32;
        }
        let blocks = n.div_ceil(k);
        s.passes.push(Pass {
            perm,
            pos,
            k,
            alice: vec![0; blocks],
            bob: vec![0; blocks],
        });
        for b in 0..blocks {
            let (lo, hi) = (b * k, ((b + 1) * k).min(n));
            let a = s.alice_parity(p, lo, hi);
            let bp = s.bob_parity(p, lo, hi);
            s.passes[p].alice[b] = a;
            s.passes[p].bob[b] = bp;
            if a != bp {
                pending.insert((p, b));
            }
        }
        // smallest blocks (earliest passes) first
        while let Some((q, b)) = pending.pop_first() {
            s.correct_block(q, b, p, &mut pending);
        }
    }
    let selector: u64 = r.random();
    let verify_hash = string_hash(selector, alice);
    let leaked = s.transcript.len() as u64;
    if string_hash(selector, &s.bob) != verify_hash {
        return Err(ProtocolError::ReconciliationFailed { leaked });
    }
    Ok(Reconciliation {
        corrected: s.bob,
        bits_leaked: leaked,
        transcript: s.transcript,
        block_sizes: s.passes.iter().map(|p| p.k).collect(),
        flips: s.flips,
        verify_hash,
    })
}

fn string_hash(selector: u64, bits: &[u8]) -> u64 {
    let mut msg = (bits.len() as u64).to_be_bytes().to_vec();
    msg.extend(bits::to_bytes(bits));
    auth::poly_hash(selector, &msg)
}
