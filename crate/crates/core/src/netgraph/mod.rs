//! Network topology: nodes, QKD links (direct or through a switch), switches
//! and prepositioned-key bridges, loaded from a versioned TOML schema.

mod budget;
mod config;

pub use budget::{link_budget, required_links, BudgetPath, MeshKind};
pub use config::{
    load_topology, load_topology_table, preset, preset_names, preset_source, to_toml, CONFIG_SCHEMA_VERSION,
    DEFAULT_FIBER_LOSS_DB_PER_KM,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{LinkId, NodeId, SwitchId};
use crate::physlink::{LinkParams, PhaseState};
use crate::qkdproto::{EntropyEstimator, Sifting};
use crate::switchfab::{SwitchPosition, SwitchSchedule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    /// Parse or schema error; the message carries line and column.
    #[error("{0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{0}")]
    Invalid(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("no such path: {0}")]
    NoPath(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tx,
    Rx,
    /// Transmitter and receiver.
    Relay,
}

impl Role {
    pub fn can_transmit(self) -> bool {
        matches!(self, Role::Tx | Role::Relay)
    }

    pub fn can_receive(self) -> bool {
        matches!(self, Role::Rx | Role::Relay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub role: Role,
    pub trusted: bool,
    pub site: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Medium {
    #[default]
    Fiber,
    Freespace,
}

/// Fiber from a node to a switch port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Port {
    pub node: NodeId,
    pub length_km: f64,
    /// Measured loss; wins over the length-derived value.
    pub loss_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchSpec {
    pub id: SwitchId,
    pub insertion_loss_db: f64,
    pub initial: SwitchPosition,
    pub schedule: SwitchSchedule,
    pub tx_ports: [Port; 2],
    pub rx_ports: [Port; 2],
}

impl SwitchSpec {
    pub fn port(&self, node: &NodeId) -> Option<&Port> {
        self.tx_ports.iter().chain(self.rx_ports.iter()).find(|p| &p.node == node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    Direct { length_km: f64, loss_db: Option<f64> },
    Switched { switch: SwitchId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub id: LinkId,
    pub tx: NodeId,
    pub rx: NodeId,
    pub route: Route,
    pub medium: Medium,
    pub sifting: Sifting,
    pub estimator: EntropyEstimator,
    /// Fully resolved parameters, losses included.
    pub params: LinkParams,
    pub phase: PhaseState,
}

/// Two co-located or otherwise directly keyed nodes sharing prepositioned
/// key but no quantum channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Bridge {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub prepositioned_bits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub name: String,
    pub fiber_loss_db_per_km: f64,
    pub auth_preposition_bits: u64,
    pub nodes: BTreeMap<NodeId, Node>,
    pub switches: BTreeMap<SwitchId, SwitchSpec>,
    pub links: BTreeMap<LinkId, LinkSpec>,
    pub bridges: BTreeMap<LinkId, Bridge>,
}

/// An edge of the key-relay graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Adjacency {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub bridge: bool,
}

impl Topology {
    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn link(&self, id: &LinkId) -> Option<&LinkSpec> {
        self.links.get(id)
    }

    /// QKD link between two nodes in either direction.
    pub fn link_between(&self, a: &NodeId, b: &NodeId) -> Option<&LinkSpec> {
        self.links
            .values()
            .find(|l| (&l.tx == a && &l.rx == b) || (&l.tx == b && &l.rx == a))
    }

    /// Every pair that shares a key reservoir: QKD links and bridges.
    pub fn adjacencies(&self) -> Vec<Adjacency> {
        let mut v: Vec<Adjacency> = self
            .links
            .values()
            .map(|l| Adjacency {
                id: l.id.clone(),
                a: l.tx.clone(),
                b: l.rx.clone(),
                bridge: false,
            })
            .chain(self.bridges.values().map(|b| Adjacency {
                id: b.id.clone(),
                a: b.a.clone(),
                b: b.b.clone(),
                bridge: true,
            }))
            .collect();
        v.sort();
        v
    }

    /// Links that run through `switch`.
    pub fn switched_links(&self, switch: &SwitchId) -> impl Iterator<Item = &LinkSpec> {
        let s = switch.clone();
        self.links
            .values()
            .filter(move |l| matches!(&l.route, Route::Switched { switch } if *switch == s))
    }
}
