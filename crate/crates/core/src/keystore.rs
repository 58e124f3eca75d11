//! Pairwise key reservoirs with one-time-use accounting.
//!
//! Every node keeps, per neighbour it shares key with, two reservoirs: an
//! authentication pool (seeded with prepositioned key, topped up from QKD
//! output) and a key pool (QKD- and relay-derived key). Bits are handed out
//! strictly FIFO by segment then offset, so two peers issuing the same
//! sequence of requests draw identical bits without negotiating. Each draw
//! and deposit is written to an [`AuditLog`].

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::Bits;
use crate::ids::NodeId;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    DirectQkd,
    Relay,
    /// Installed out of band before operation (authentication bootstrap,
    /// co-located bridges).
    Prepositioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    OneTimePad,
    Authentication,
    Delivery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Auth,
    Key,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("segment `{0}` already deposited for this pair")]
    DuplicateSegment(String),
    #[error("key starvation: requested {requested} bits, {available} available")]
    Starvation { requested: u64, available: u64 },
    #[error("no reservoir between {0} and {1}")]
    NoReservoir(NodeId, NodeId),
}

/// One line of the key audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AuditRecord {
    Deposit {
        time: SimTime,
        node: NodeId,
        peer: NodeId,
        pool: Pool,
        segment: String,
        origin: Origin,
        start: u64,
        end: u64,
    },
    Consume {
        time: SimTime,
        node: NodeId,
        peer: NodeId,
        pool: Pool,
        purpose: Purpose,
        start: u64,
        end: u64,
        context: String,
    },
    /// Key consumed for a relay hop whose session was abandoned. The bits
    /// stay consumed; this only records why they never reached a delivery.
    WriteOff {
        time: SimTime,
        node: NodeId,
        peer: NodeId,
        start: u64,
        end: u64,
        session: u64,
    },
}

pub type AuditLog = Vec<AuditRecord>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: String,
    pub origin: Origin,
    bits: Bits,
    start: u64,
    consumed: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

/// Bits handed out by a consume call together with their stream offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Draw {
    pub bits: Bits,
    pub offsets: Range<u64>,
}

/// One node's view of the key it shares with one peer, for one pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyReservoir {
    owner: NodeId,
    peer: NodeId,
    pool: Pool,
    segments: Vec<Segment>,
    ids: BTreeSet<String>,
    head: usize,
    deposited: u64,
    consumed: u64,
}

impl KeyReservoir {
    pub fn new(owner: NodeId, peer: NodeId, pool: Pool) -> KeyReservoir {
        KeyReservoir {
            owner,
            peer,
            pool,
            segments: Vec::new(),
            ids: BTreeSet::new(),
            head: 0,
            deposited: 0,
            consumed: 0,
        }
    }

    pub fn owner(&self) -> &NodeId {
        &self.owner
    }

    pub fn peer(&self) -> &NodeId {
        &self.peer
    }

    pub fn available(&self) -> u64 {
        self.deposited - self.consumed
    }

    pub fn deposited(&self) -> u64 {
        self.deposited
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn deposit(
        &mut self,
        segment_id: impl Into<String>,
        bits: Bits,
        origin: Origin,
        at: SimTime,
        audit: &mut AuditLog,
    ) -> Result<(), KeyError> {
        let id = segment_id.into();
        if self.ids.contains(&id) {
            return Err(KeyError::DuplicateSegment(id));
        }
        let start = self.deposited;
        let end = start + bits.len() as u64;
        audit.push(AuditRecord::Deposit {
            time: at,
            node: self.owner.clone(),
            peer: self.peer.clone(),
            pool: self.pool,
            segment: id.clone(),
            origin,
            start,
            end,
        });
        self.ids.insert(id.clone());
        self.deposited = end;
        self.segments.push(Segment {
            id,
            origin,
            bits,
            start,
            consumed: 0,
        });
        Ok(())
    }

    /// Take the next `n` bits. Starvation leaves the reservoir untouched.
    pub fn consume(
        &mut self,
        n: u64,
        purpose: Purpose,
        at: SimTime,
        context: &str,
        audit: &mut AuditLog,
    ) -> Result<Draw, KeyError> {
        let available = self.available();
        if n > available {
            return Err(KeyError::Starvation { requested: n, available });
        }
        let start = self.consumed;
        let mut out = Vec::with_capacity(n as usize);
        let mut need = n as usize;
        while need > 0 {
            let seg = &mut self.segments[self.head];
            let take = need.min(seg.bits.len() - seg.consumed);
            out.extend_from_slice(&seg.bits[seg.consumed..seg.consumed + take]);
            seg.consumed += take;
            need -= take;
            if seg.consumed == seg.bits.len() {
                self.head += 1;
            }
        }
        // skip over empty segments so `head` always points at live key
        while self.head < self.segments.len() && self.segments[self.head].consumed == self.segments[self.head].bits.len() {
            self.head += 1;
        }
        self.consumed += n;
        if n > 0 {
            audit.push(AuditRecord::Consume {
                time: at,
                node: self.owner.clone(),
                peer: self.peer.clone(),
                pool: self.pool,
                purpose,
                start,
                end: start + n,
                context: context.to_owned(),
            });
        }
        Ok(Draw {
            bits: out,
            offsets: start..start + n,
        })
    }

    /// Same segment ids, lengths, bits and consumption state as `other`.
    pub fn mirrors(&self, other: &KeyReservoir) -> bool {
        self.pool == other.pool
            && self.consumed == other.consumed
            && self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.id == b.id && a.bits == b.bits && a.consumed == b.consumed)
    }

    /// Bits at stream offsets `range`, consumed or not. Only a simulator
    /// with every node's memory in hand can use this for auditing.
    pub fn stream_bits(&self, range: Range<u64>) -> Option<Bits> {
        if range.end > self.deposited || range.start > range.end {
            return None;
        }
        let mut out = Vec::with_capacity((range.end - range.start) as usize);
        for s in &self.segments {
            let (lo, hi) = (s.start.max(range.start), (s.start + s.bits.len() as u64).min(range.end));
            if lo < hi {
                out.extend_from_slice(&s.bits[(lo - s.start) as usize..(hi - s.start) as usize]);
            }
        }
        Some(out)
    }

    /// True if some segment holds exactly `bits`.
    pub fn holds(&self, bits: &[u8]) -> bool {
        self.segments.iter().any(|s| s.bits == bits)
    }
}

/// Authentication and key pools shared with one peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairKeys {
    pub auth: KeyReservoir,
    pub key: KeyReservoir,
}

impl PairKeys {
    pub fn new(owner: &NodeId, peer: &NodeId) -> PairKeys {
        PairKeys {
            auth: KeyReservoir::new(owner.clone(), peer.clone(), Pool::Auth),
            key: KeyReservoir::new(owner.clone(), peer.clone(), Pool::Key),
        }
    }

    pub fn pool(&self, pool: Pool) -> &KeyReservoir {
        match pool {
            Pool::Auth => &self.auth,
            Pool::Key => &self.key,
        }
    }

    pub fn pool_mut(&mut self, pool: Pool) -> &mut KeyReservoir {
        match pool {
            Pool::Auth => &mut self.auth,
            Pool::Key => &mut self.key,
        }
    }
}

/// Everything secret a node holds: its reservoirs and any relayed
/// plaintext currently in memory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeVault {
    pub pairs: BTreeMap<NodeId, PairKeys>,
    /// In-flight relay plaintext by session id.
    pub relay_buffer: BTreeMap<u64, Bits>,
}

impl NodeVault {
    /// True if `bits` is present anywhere in this node's memory.
    pub fn contains(&self, bits: &[u8]) -> bool {
        self.relay_buffer.values().any(|b| b == bits) || self.pairs.values().any(|p| p.auth.holds(bits) || p.key.holds(bits))
    }
}

/// Default size of the prepositioned authentication segment per adjacent pair.
pub const DEFAULT_AUTH_PREPOSITION_BITS: usize = 1 << 20;

/// All node vaults of a simulated network plus the shared audit trail.
///
/// Pairwise operations draw from both endpoints' mirrored reservoirs in the
/// same call, which is how the simulator keeps peers in lock step; in a real
/// deployment the message would carry the offset range instead.
#[derive(Debug, Clone, Default)]
pub struct KeyNetwork {
    pub vaults: BTreeMap<NodeId, NodeVault>,
    pub audit: AuditLog,
    /// Top up the auth pool by at least this much when it runs short.
    pub auth_refill_bits: u64,
    /// Authentication key relay hops must leave in each auth pool, so that
    /// relaying can never starve a link of the key it needs to make more.
    pub auth_reserve_bits: u64,
    refills: u64,
}

impl KeyNetwork {
    pub fn new() -> KeyNetwork {
        KeyNetwork {
            auth_refill_bits: 8192,
            ..KeyNetwork::default()
        }
    }

    pub fn with_auth_reserve(mut self, bits: u64) -> KeyNetwork {
        self.auth_reserve_bits = bits;
        self
    }

    pub fn add_node(&mut self, node: &NodeId) {
        self.vaults.entry(node.clone()).or_default();
    }

    pub fn ensure_pair(&mut self, a: &NodeId, b: &NodeId) {
        for (x, y) in [(a, b), (b, a)] {
            self.vaults
                .entry(x.clone())
                .or_default()
                .pairs
                .entry(y.clone())
                .or_insert_with(|| PairKeys::new(x, y));
        }
    }

    pub fn pair(&self, node: &NodeId, peer: &NodeId) -> Option<&PairKeys> {
        self.vaults.get(node)?.pairs.get(peer)
    }

    fn pair_mut(&mut self, node: &NodeId, peer: &NodeId) -> Result<&mut PairKeys, KeyError> {
        self.vaults
            .get_mut(node)
            .and_then(|v| v.pairs.get_mut(peer))
            .ok_or_else(|| KeyError::NoReservoir(node.clone(), peer.clone()))
    }

    pub fn available(&self, a: &NodeId, b: &NodeId, pool: Pool) -> u64 {
        self.pair(a, b).map_or(0, |p| p.pool(pool).available())
    }

    /// Deposit the same segment at both endpoints.
    pub fn deposit_pair(
        &mut self,
        a: &NodeId,
        b: &NodeId,
        pool: Pool,
        segment: &str,
        bits: Bits,
        origin: Origin,
        at: SimTime,
    ) -> Result<(), KeyError> {
        self.ensure_pair(a, b);
        if self.pair_mut(a, b)?.pool(pool).ids.contains(segment) || self.pair_mut(b, a)?.pool(pool).ids.contains(segment) {
            return Err(KeyError::DuplicateSegment(segment.to_owned()));
        }
        let mut audit = std::mem::take(&mut self.audit);
        let res = self
            .pair_mut(a, b)?
            .pool_mut(pool)
            .deposit(segment, bits.clone(), origin, at, &mut audit)
            .and_then(|_| {
                self.pair_mut(b, a)?
                    .pool_mut(pool)
                    .deposit(segment, bits, origin, at, &mut audit)
            });
        self.audit = audit;
        res
    }

    /// Draw `n` bits from both endpoints' mirrored reservoirs. Returns
    /// (a's draw, b's draw); they are identical while the mirrors hold.
    pub fn consume_pair(
        &mut self,
        a: &NodeId,
        b: &NodeId,
        pool: Pool,
        n: u64,
        purpose: Purpose,
        at: SimTime,
        context: &str,
    ) -> Result<(Draw, Draw), KeyError> {
        let avail = self.available(a, b, pool).min(self.available(b, a, pool));
        if n > avail {
            return Err(KeyError::Starvation {
                requested: n,
                available: avail,
            });
        }
        let mut audit = std::mem::take(&mut self.audit);
        let da = self
            .pair_mut(a, b)?
            .pool_mut(pool)
            .consume(n, purpose, at, context, &mut audit);
        let db = self
            .pair_mut(b, a)?
            .pool_mut(pool)
            .consume(n, purpose, at, context, &mut audit);
        self.audit = audit;
        Ok((da?, db?))
    }

    /// Make sure the auth pool between `a` and `b` holds at least `need`
    /// bits, moving key-pool bits over if necessary.
    pub fn ensure_auth(&mut self, a: &NodeId, b: &NodeId, need: u64, at: SimTime) -> Result<(), KeyError> {
        let have = self.available(a, b, Pool::Auth);
        if have >= need {
            return Ok(());
        }
        let key = self.available(a, b, Pool::Key);
        let shortfall = need - have;
        if key < shortfall {
            return Err(KeyError::Starvation {
                requested: need,
                available: have + key,
            });
        }
        let amount = self.auth_refill_bits.max(shortfall).min(key);
        let (draw, _) = self.consume_pair(a, b, Pool::Key, amount, Purpose::Authentication, at, "auth-refill")?;
        self.refills += 1;
        let seg = format!("auth-refill/{}", self.refills);
        self.deposit_pair(a, b, Pool::Auth, &seg, draw.bits, Origin::DirectQkd, at)
    }

    /// Key a consumer at `node` draws for use with `peer` (single-sided:
    /// the peer's consumer makes the matching call on its own view).
    pub fn deliver(&mut self, node: &NodeId, peer: &NodeId, n: u64, at: SimTime) -> Result<Draw, KeyError> {
        let mut audit = std::mem::take(&mut self.audit);
        let res = self
            .pair_mut(node, peer)
            .and_then(|p| p.key.consume(n, Purpose::Delivery, at, "delivery", &mut audit));
        self.audit = audit;
        res
    }

    /// Record that an already consumed one-time-pad range on both sides of
    /// a pair will never carry a delivery.
    pub fn write_off(&mut self, a: &NodeId, b: &NodeId, range: Range<u64>, session: u64, at: SimTime) {
        for (node, peer) in [(a, b), (b, a)] {
            self.audit.push(AuditRecord::WriteOff {
                time: at,
                node: node.clone(),
                peer: peer.clone(),
                start: range.start,
                end: range.end,
                session,
            });
        }
    }

    /// Nodes whose memory contains `bits`.
    pub fn holders(&self, bits: &[u8]) -> Vec<NodeId> {
        self.vaults
            .iter()
            .filter(|(_, v)| v.contains(bits))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Every pair's two views mirror each other.
    pub fn mirrors_hold(&self) -> Result<(), String> {
        for (node, vault) in &self.vaults {
            for (peer, keys) in &vault.pairs {
                let other = self
                    .pair(peer, node)
                    .ok_or_else(|| format!("{node} holds key for {peer} but {peer} has no reservoir for {node}"))?;
                if !keys.auth.mirrors(&other.auth) || !keys.key.mirrors(&other.key) {
                    return Err(format!("reservoirs {node}<->{peer} are not mirror images"));
                }
            }
        }
        Ok(())
    }
}

/// Audit checks shared by the runtime and the `verify` subcommand.
pub mod audit {
    use super::*;

    type Stream = (NodeId, NodeId, Pool);

    /// No (node, peer, pool, offset) is ever consumed twice.
    pub fn check_one_time_use(log: &[AuditRecord]) -> Result<(), String> {
        let mut ranges: BTreeMap<Stream, Vec<(u64, u64)>> = BTreeMap::new();
        for r in log {
            if let AuditRecord::Consume {
                node,
                peer,
                pool,
                start,
                end,
                ..
            } = r
            {
                ranges
                    .entry((node.clone(), peer.clone(), *pool))
                    .or_default()
                    .push((*start, *end));
            }
        }
        for ((node, peer, pool), mut rs) in ranges {
            rs.sort_unstable();
            for w in rs.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(format!(
                        "{node}->{peer} {pool:?}: offsets {}..{} and {}..{} overlap",
                        w[0].0, w[0].1, w[1].0, w[1].1
                    ));
                }
            }
        }
        Ok(())
    }

    /// Deposited = consumed + available for every stream, at every prefix of
    /// the log (consumption never runs ahead of deposits). Returns the final
    /// available amount per stream.
    pub fn check_conservation(log: &[AuditRecord]) -> Result<BTreeMap<(NodeId, NodeId, Pool), u64>, String> {
        let mut deposited: BTreeMap<Stream, u64> = BTreeMap::new();
        let mut consumed: BTreeMap<Stream, u64> = BTreeMap::new();
        for r in log {
            match r {
                AuditRecord::Deposit {
                    node,
                    peer,
                    pool,
                    start,
                    end,
                    ..
                } => {
                    let d = deposited.entry((node.clone(), peer.clone(), *pool)).or_default();
                    if *start != *d {
                        return Err(format!("{node}->{peer} {pool:?}: deposit at offset {start}, expected {d}"));
                    }
                    *d = *end;
                }
                AuditRecord::Consume {
                    node,
                    peer,
                    pool,
                    start,
                    end,
                    ..
                } => {
                    let key = (node.clone(), peer.clone(), *pool);
                    let d = deposited.get(&key).copied().unwrap_or(0);
                    let c = consumed.entry(key).or_default();
                    if *start != *c {
                        return Err(format!(
                            "{node}->{peer} {pool:?}: consume at offset {start}, expected {c} (FIFO)"
                        ));
                    }
                    if *end > d {
                        return Err(format!(
                            "{node}->{peer} {pool:?}: consumed up to {end} but only {d} deposited"
                        ));
                    }
                    *c = *end;
                }
                AuditRecord::WriteOff { .. } => {}
            }
        }
        Ok(deposited
            .into_iter()
            .map(|(k, d)| {
                let c = consumed.get(&k).copied().unwrap_or(0);
                (k, d - c)
            })
            .collect())
    }

    /// Every write-off covers a range that was actually consumed as one-time pad.
    pub fn check_write_offs(log: &[AuditRecord]) -> Result<(), String> {
        let mut otp: BTreeSet<(NodeId, NodeId, u64, u64)> = BTreeSet::new();
        for r in log {
            if let AuditRecord::Consume {
                node,
                peer,
                pool: Pool::Key,
                purpose: Purpose::OneTimePad,
                start,
                end,
                ..
            } = r
            {
                otp.insert((node.clone(), peer.clone(), *start, *end));
            }
        }
        for r in log {
            if let AuditRecord::WriteOff {
                node,
                peer,
                start,
                end,
                session,
                ..
            } = r
            {
                if !otp.contains(&(node.clone(), peer.clone(), *start, *end)) {
                    return Err(format!(
                        "session {session}: write-off {node}->{peer} {start}..{end} matches no OTP draw"
                    ));
                }
            }
        }
        Ok(())
    }
}
