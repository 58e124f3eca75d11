use std::collections::BTreeSet;
use std::ops::Range;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{find_path, hop_links, LinkHealthView, RelayError};
use crate::bits::{self, Bits};
use crate::ids::{LinkId, NodeId};
use crate::keystore::{KeyNetwork, Origin, Pool, Purpose};
use crate::netgraph::Topology;
use crate::qkdproto::wire::{encode, Message, Record};
use crate::qkdproto::{auth_tag, verify_tag, AuthKey, AUTH_KEY_BITS};
use crate::rng;
use crate::time::SimTime;

/// Authentication key spent per relayed hop message.
pub const RELAY_AUTH_BITS: u64 = AUTH_KEY_BITS as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    /// Waiting for a qualifying path.
    PathPending,
    InFlight,
    Delivered,
    /// Between abandoning a path and finding the next.
    Rerouting,
    Failed,
}

/// One hop message as sent, with the pad offsets it used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopTranscript {
    pub attempt: u32,
    pub hop: u32,
    pub from: NodeId,
    pub to: NodeId,
    pub link: LinkId,
    pub ciphertext: Bits,
    pub key_offsets: Range<u64>,
    pub tag: u64,
    /// Still part of a live attempt; false once written off by a reroute.
    pub live: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HopOutcome {
    Forwarded {
        hop: u32,
        to: NodeId,
    },
    Delivered,
    /// Not enough pad or authentication key on this hop; nothing consumed.
    Starved {
        link: LinkId,
        requested: u64,
        available: u64,
    },
    /// The receiver rejected the tag. The session is dead and the link
    /// should be flagged.
    AuthFailed {
        link: LinkId,
    },
}

/// State of one end-to-end key delivery, owned by the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelaySession {
    pub session_id: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub path: Vec<NodeId>,
    pub links: Vec<LinkId>,
    pub r_length: u64,
    pub status: SessionStatus,
    pub hop_transcripts: Vec<HopTranscript>,
    /// Paths tried so far.
    pub attempts: u32,
    /// Index into `path` of the node currently holding `R`.
    pub position: usize,
    pub cause: Option<String>,
    seed: u64,
    r: Bits,
}

impl RelaySession {
    pub fn new(session_id: u64, src: NodeId, dst: NodeId, r_length: u64, seed: u64) -> RelaySession {
        RelaySession {
            session_id,
            src,
            dst,
            path: Vec::new(),
            links: Vec::new(),
            r_length,
            status: SessionStatus::PathPending,
            hop_transcripts: Vec::new(),
            attempts: 0,
            position: 0,
            cause: None,
            seed,
            r: Bits::new(),
        }
    }

    /// The key being delivered. Empty until a path is planned.
    pub fn secret(&self) -> &[u8] {
        &self.r
    }

    pub fn segment_id(&self) -> String {
        format!("relay/{}", self.session_id)
    }

    /// Look for a path and, if one exists, draw a fresh `R` and go in flight.
    /// Without a path the session stays (or becomes) `PathPending`.
    pub fn plan(
        &mut self,
        topo: &Topology,
        keys: &mut KeyNetwork,
        health: &LinkHealthView,
        exclude: &BTreeSet<LinkId>,
        at: SimTime,
    ) -> Result<(), RelayError> {
        self.plan_inner(topo, keys, health, exclude, at, None)
    }

    /// [`plan`](Self::plan) with a caller-chosen `R` of `r_length` bits.
    pub fn plan_with_secret(
        &mut self,
        topo: &Topology,
        keys: &mut KeyNetwork,
        health: &LinkHealthView,
        r: Bits,
        at: SimTime,
    ) -> Result<(), RelayError> {
        if r.len() as u64 != self.r_length {
            return Err(RelayError::SecretLength {
                expected: self.r_length,
                got: r.len() as u64,
            });
        }
        self.plan_inner(topo, keys, health, &BTreeSet::new(), at, Some(r))
    }

    fn plan_inner(
        &mut self,
        topo: &Topology,
        keys: &mut KeyNetwork,
        health: &LinkHealthView,
        exclude: &BTreeSet<LinkId>,
        at: SimTime,
        r: Option<Bits>,
    ) -> Result<(), RelayError> {
        if matches!(
            self.status,
            SessionStatus::Delivered | SessionStatus::Failed | SessionStatus::InFlight
        ) {
            return Err(RelayError::NotInFlight(self.status));
        }
        let path = match find_path(topo, keys, health, &self.src, &self.dst, self.r_length, exclude) {
            Ok(p) => p,
            Err(e @ RelayError::NoPath { .. }) => {
                self.status = SessionStatus::PathPending;
                return Err(e);
            }
            Err(e) => {
                self.fail(keys, e.to_string(), at);
                return Err(e);
            }
        };
        self.links = hop_links(topo, &path)?;
        self.path = path;
        self.attempts += 1;
        self.r = r.unwrap_or_else(|| {
            let mut g = rng::rng(rng::derive(self.seed, self.attempts as u64));
            (0..self.r_length).map(|_| (g.next_u32() & 1) as u8).collect()
        });
        self.position = 0;
        stash(keys, &self.src, self.session_id, self.r.clone());
        self.status = SessionStatus::InFlight;
        Ok(())
    }

    /// Move `R` across the next hop. `channel` sees the authenticated record
    /// in transit and may alter it.
    pub fn step(
        &mut self,
        keys: &mut KeyNetwork,
        at: SimTime,
        channel: &mut dyn FnMut(&mut Record),
    ) -> Result<HopOutcome, RelayError> {
        if self.status != SessionStatus::InFlight {
            return Err(RelayError::NotInFlight(self.status));
        }
        let hop = self.position;
        let (from, to) = (self.path[hop].clone(), self.path[hop + 1].clone());
        let link = self.links[hop].clone();
        let ctx = format!("relay/{}/{}/{}", self.session_id, self.attempts, hop);

        // check both pools before consuming anything
        let pad = keys
            .available(&from, &to, Pool::Key)
            .min(keys.available(&to, &from, Pool::Key));
        let auth = keys
            .available(&from, &to, Pool::Auth)
            .min(keys.available(&to, &from, Pool::Auth));
        let auth_need = RELAY_AUTH_BITS + keys.auth_reserve_bits;
        let auth_short = auth_need.saturating_sub(auth);
        if pad < self.r_length + auth_short {
            return Ok(HopOutcome::Starved {
                link,
                requested: self.r_length + auth_short,
                available: pad,
            });
        }
        // pad first: a refill may take everything left in the key pool
        let (pad_tx, pad_rx) = keys.consume_pair(&from, &to, Pool::Key, self.r_length, Purpose::OneTimePad, at, &ctx)?;
        keys.ensure_auth(&from, &to, auth_need, at)?;
        let (auth_tx, auth_rx) = keys.consume_pair(&from, &to, Pool::Auth, RELAY_AUTH_BITS, Purpose::Authentication, at, &ctx)?;

        let plain = held(keys, &from, self.session_id).expect("sender holds R");
        let ciphertext = bits::xor(&plain, &pad_tx.bits);
        let mut record = Record::new(
            self.session_id,
            Message::RelayCiphertext {
                session: self.session_id,
                hop: hop as u32,
                ciphertext: ciphertext.clone(),
            },
        );
        let tag = auth_tag(&key_of(&auth_tx.bits), &encode(&record));
        self.hop_transcripts.push(HopTranscript {
            attempt: self.attempts,
            hop: hop as u32,
            from: from.clone(),
            to: to.clone(),
            link: link.clone(),
            ciphertext,
            key_offsets: pad_tx.offsets.clone(),
            tag,
            live: true,
        });

        channel(&mut record);
        if !verify_tag(&key_of(&auth_rx.bits), &encode(&record), tag) {
            self.fail(keys, format!("authentication failure on {link}"), at);
            return Ok(HopOutcome::AuthFailed { link });
        }
        let Message::RelayCiphertext {
            ciphertext: received, ..
        } = &record.message
        else {
            unreachable!("tag covers the message type");
        };
        let recovered = bits::xor(received, &pad_rx.bits);

        // a relay forgets R as soon as it has forwarded it
        if from != self.src {
            unstash(keys, &from, self.session_id);
        }
        self.position += 1;
        if to != self.dst {
            stash(keys, &to, self.session_id, recovered);
            return Ok(HopOutcome::Forwarded { hop: hop as u32, to });
        }

        unstash(keys, &self.src, self.session_id);
        debug_assert_eq!(recovered, self.r);
        keys.deposit_pair(
            &self.src,
            &self.dst,
            Pool::Key,
            &self.segment_id(),
            recovered,
            Origin::Relay,
            at,
        )?;
        self.status = SessionStatus::Delivered;
        Ok(HopOutcome::Delivered)
    }

    /// Abandon the current path after `failed` went bad, write off the pad
    /// already spent on it and try again with a fresh `R`.
    pub fn reroute(
        &mut self,
        topo: &Topology,
        keys: &mut KeyNetwork,
        health: &LinkHealthView,
        failed: &BTreeSet<LinkId>,
        at: SimTime,
    ) -> Result<(), RelayError> {
        if !matches!(self.status, SessionStatus::InFlight | SessionStatus::PathPending) {
            return Err(RelayError::NotInFlight(self.status));
        }
        self.abandon(keys, at);
        self.status = SessionStatus::Rerouting;
        match self.plan(topo, keys, health, failed, at) {
            Ok(()) => Ok(()),
            // a path exists but is short of key: wait for replenishment
            Err(e @ RelayError::NoPath { .. }) if find_path(topo, keys, health, &self.src, &self.dst, 0, failed).is_ok() => {
                self.status = SessionStatus::PathPending;
                Err(e)
            }
            Err(e) => {
                if self.status != SessionStatus::Failed {
                    self.fail(keys, format!("no alternate path: {e}"), at);
                }
                Err(e)
            }
        }
    }

    /// Pad spent by hops of abandoned attempts.
    pub fn written_off(&self) -> impl Iterator<Item = &HopTranscript> {
        self.hop_transcripts.iter().filter(|h| !h.live)
    }

    fn abandon(&mut self, keys: &mut KeyNetwork, at: SimTime) {
        for h in self.hop_transcripts.iter_mut().filter(|h| h.live) {
            keys.write_off(&h.from, &h.to, h.key_offsets.clone(), self.session_id, at);
            h.live = false;
        }
        for n in &self.path {
            unstash(keys, n, self.session_id);
        }
        self.r.clear();
    }

    fn fail(&mut self, keys: &mut KeyNetwork, cause: String, at: SimTime) {
        self.abandon(keys, at);
        unstash(keys, &self.src, self.session_id);
        self.status = SessionStatus::Failed;
        self.cause = Some(cause);
    }
}

fn key_of(bits: &[u8]) -> AuthKey {
    AuthKey::from_bits(bits).expect("draw has AUTH_KEY_BITS bits")
}

fn stash(keys: &mut KeyNetwork, node: &NodeId, session: u64, r: Bits) {
    keys.vaults.entry(node.clone()).or_default().relay_buffer.insert(session, r);
}

fn unstash(keys: &mut KeyNetwork, node: &NodeId, session: u64) {
    if let Some(v) = keys.vaults.get_mut(node) {
        v.relay_buffer.remove(&session);
    }
}

fn held(keys: &KeyNetwork, node: &NodeId, session: u64) -> Option<Bits> {
    keys.vaults.get(node)?.relay_buffer.get(&session).cloned()
}
