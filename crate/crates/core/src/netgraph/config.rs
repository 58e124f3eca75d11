//! TOML topology schema, validation and canonical serialization.
//!
//! The full schema is documented in the guide; every table rejects unknown
//! keys so a typo fails loudly instead of silently taking a default.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Bridge, ConfigError, LinkSpec, Medium, Node, Port, Role, Route, SwitchSpec, Topology};
use crate::ids::{LinkId, NodeId, SwitchId};
use crate::keystore::DEFAULT_AUTH_PREPOSITION_BITS;
use crate::physlink::{LinkParams, PhaseState};
use crate::qkdproto::{EntropyEstimator, EstimatorKind, Sifting};
use crate::switchfab::{SwitchPosition, SwitchSchedule, DEFAULT_INSERTION_LOSS_DB, DEFAULT_SWITCH_PERIOD_S};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FIBER_LOSS_DB_PER_KM: f64 = 0.2;

const PRESETS: &[(&str, &str)] = &[
    ("cambridge", include_str!("presets/cambridge.toml")),
    ("diamond", include_str!("presets/diamond.toml")),
    ("chain", include_str!("presets/chain.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// Source text of a built-in topology.
pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn preset(name: &str) -> Result<Topology, ConfigError> {
    let src = preset_source(name).ok_or_else(|| ConfigError::UnknownPreset(name.to_owned()))?;
    load_topology(src)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pulse_rate_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_photon_number: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_efficiency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dark_count_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dead_time_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intrinsic_error: Option<f64>,
}

impl RawParams {
    fn apply(&self, p: &mut LinkParams) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.pulse_rate_hz, self.pulse_rate_hz);
        set(&mut p.mean_photon_number, self.mean_photon_number);
        set(&mut p.detector_efficiency, self.detector_efficiency);
        set(&mut p.dark_count_prob, self.dark_count_prob);
        set(&mut p.dead_time_s, self.dead_time_s);
        set(&mut p.intrinsic_error, self.intrinsic_error);
    }

    fn full(p: &LinkParams) -> RawParams {
        RawParams {
            pulse_rate_hz: Some(p.pulse_rate_hz),
            mean_photon_number: Some(p.mean_photon_number),
            detector_efficiency: Some(p.detector_efficiency),
            dark_count_prob: Some(p.dark_count_prob),
            dead_time_s: Some(p.dead_time_s),
            intrinsic_error: Some(p.intrinsic_error),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawPhase {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_rate_rad_per_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback_gain: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawDefaults {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fiber_loss_db_per_km: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auth_preposition_bits: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<RawParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<RawPhase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawNode {
    pub id: String,
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trusted: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum Side {
    Tx,
    Rx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawPort {
    pub node: String,
    pub side: Side,
    pub length_km: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawSwitch {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_loss_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<SwitchPosition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toggles_s: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manual: Option<bool>,
    #[serde(rename = "port", default)]
    pub ports: Vec<RawPort>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawLink {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub tx: String,
    pub rx: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub via: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_km: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub medium: Option<Medium>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sifting: Option<Sifting>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub security_margin_bits: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<RawParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<RawPhase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawBridge {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub a: String,
    pub b: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prepositioned_bits: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub defaults: RawDefaults,
    #[serde(rename = "node", default)]
    pub nodes: Vec<RawNode>,
    #[serde(rename = "switch", default, skip_serializing_if = "Vec::is_empty")]
    pub switches: Vec<RawSwitch>,
    #[serde(rename = "link", default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<RawLink>,
    #[serde(rename = "bridge", default, skip_serializing_if = "Vec::is_empty")]
    pub bridges: Vec<RawBridge>,
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn non_negative(what: &str, v: f64) -> Result<f64, ConfigError> {
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(invalid(format!("{what} must be non-negative, got {v}")))
    }
}

/// Parse and validate a topology.
pub fn load_topology(text: &str) -> Result<Topology, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    from_raw(raw)
}

/// Validate a topology that arrived as an already parsed TOML table, such as
/// one inlined in a scenario file.
pub fn load_topology_table(table: toml::Table) -> Result<Topology, ConfigError> {
    let raw: RawConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    from_raw(raw)
}

pub(crate) fn from_raw(raw: RawConfig) -> Result<Topology, ConfigError> {
    if raw.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(ConfigError::Version {
            found: raw.schema_version,
            expected: CONFIG_SCHEMA_VERSION,
        });
    }
    if raw.nodes.is_empty() {
        return Err(invalid("topology has no nodes"));
    }
    let coeff = non_negative(
        "fiber_loss_db_per_km",
        raw.defaults.fiber_loss_db_per_km.unwrap_or(DEFAULT_FIBER_LOSS_DB_PER_KM),
    )?;
    let mut base = LinkParams::default();
    if let Some(p) = &raw.defaults.params {
        p.apply(&mut base);
    }
    let mut base_phase = PhaseState::default();
    if let Some(p) = &raw.defaults.phase {
        apply_phase(p, &mut base_phase);
    }

    let mut nodes = BTreeMap::new();
    for n in raw.nodes {
        let trusted = n.trusted.unwrap_or(true);
        if n.role == Role::Relay && !trusted {
            return Err(invalid(format!("relay node `{}` must be trusted", n.id)));
        }
        let id = NodeId::new(&n.id);
        if nodes
            .insert(
                id.clone(),
                Node {
                    id,
                    role: n.role,
                    trusted,
                    site: n.site,
                },
            )
            .is_some()
        {
            return Err(invalid(format!("duplicate node `{}`", n.id)));
        }
    }
    let node = |name: &str| {
        nodes
            .get(&NodeId::from(name))
            .ok_or_else(|| ConfigError::UnknownNode(name.to_owned()))
    };

    let mut switches = BTreeMap::new();
    for s in raw.switches {
        let mut tx = Vec::new();
        let mut rx = Vec::new();
        for p in s.ports {
            let n = node(&p.node)?;
            let port = Port {
                node: n.id.clone(),
                length_km: non_negative("port length_km", p.length_km)?,
                loss_db: p.loss_db.map(|l| non_negative("port loss_db", l)).transpose()?,
            };
            match p.side {
                Side::Tx if n.role.can_transmit() => tx.push(port),
                Side::Rx if n.role.can_receive() => rx.push(port),
                side => return Err(invalid(format!("node `{}` cannot sit on a {side:?} port", p.node))),
            }
        }
        let (tx, rx): ([Port; 2], [Port; 2]) = match (tx.try_into(), rx.try_into()) {
            (Ok(t), Ok(r)) => (t, r),
            _ => return Err(invalid(format!("switch `{}` needs exactly two tx and two rx ports", s.id))),
        };
        let schedule = match (s.period_s, s.toggles_s, s.manual.unwrap_or(false)) {
            (None, None, true) => SwitchSchedule::Manual,
            (Some(p), None, false) => SwitchSchedule::Periodic { period_s: p },
            (None, Some(t), false) => SwitchSchedule::Explicit { toggles_s: t },
            (None, None, false) => SwitchSchedule::Periodic {
                period_s: DEFAULT_SWITCH_PERIOD_S,
            },
            _ => {
                return Err(invalid(format!(
                    "switch `{}`: period_s, toggles_s and manual are exclusive",
                    s.id
                )))
            }
        };
        let id = SwitchId::new(&s.id);
        // reuse the runtime constructor for port and schedule checks
        crate::switchfab::SwitchState::new(
            id.clone(),
            [tx[0].node.clone(), tx[1].node.clone()],
            [rx[0].node.clone(), rx[1].node.clone()],
            SwitchPosition::Bar,
            schedule.clone(),
        )
        .map_err(|e| invalid(e.to_string()))?;
        let spec = SwitchSpec {
            id: id.clone(),
            insertion_loss_db: non_negative("insertion_loss_db", s.insertion_loss_db.unwrap_or(DEFAULT_INSERTION_LOSS_DB))?,
            initial: s.initial.unwrap_or(SwitchPosition::Bar),
            schedule,
            tx_ports: tx,
            rx_ports: rx,
        };
        if switches.insert(id, spec).is_some() {
            return Err(invalid(format!("duplicate switch `{}`", s.id)));
        }
    }

    let mut ids = BTreeSet::new();
    let mut pairs = BTreeSet::new();
    let mut links = BTreeMap::new();
    for l in raw.links {
        let tx = node(&l.tx)?;
        let rx = node(&l.rx)?;
        if !tx.role.can_transmit() {
            return Err(invalid(format!("link {}->{}: `{}` cannot transmit", l.tx, l.rx, l.tx)));
        }
        if !rx.role.can_receive() {
            return Err(invalid(format!("link {}->{}: `{}` cannot receive", l.tx, l.rx, l.rx)));
        }
        if tx.id == rx.id {
            return Err(invalid(format!("link {}->{} joins a node to itself", l.tx, l.rx)));
        }
        let id = LinkId::new(l.id.clone().unwrap_or_else(|| format!("{}-{}", l.tx, l.rx)));
        let mut params = base;
        if let Some(p) = &l.params {
            p.apply(&mut params);
        }
        let route = match (&l.via, l.length_km, l.loss_db) {
            (Some(sw), None, None) => {
                let s = switches
                    .get(&SwitchId::from(sw.as_str()))
                    .ok_or_else(|| invalid(format!("link `{id}`: unknown switch `{sw}`")))?;
                if !s.tx_ports.iter().any(|p| p.node == tx.id) || !s.rx_ports.iter().any(|p| p.node == rx.id) {
                    return Err(invalid(format!(
                        "link `{id}`: {} and {} are not tx/rx ports of switch `{sw}`",
                        l.tx, l.rx
                    )));
                }
                params.insertion_loss_db = s.insertion_loss_db;
                let port_loss = |p: &Port| p.loss_db.unwrap_or(p.length_km * coeff);
                params.channel_loss_db = port_loss(s.port(&tx.id).unwrap()) + port_loss(s.port(&rx.id).unwrap());
                Route::Switched { switch: s.id.clone() }
            }
            (Some(_), _, _) => return Err(invalid(format!("link `{id}`: `via` excludes length_km and loss_db"))),
            (None, None, None) => return Err(invalid(format!("link `{id}`: needs `via`, `length_km` or `loss_db`"))),
            (None, len, loss) => {
                let length_km = non_negative("length_km", len.unwrap_or(0.0))?;
                let loss_db = loss.map(|v| non_negative("loss_db", v)).transpose()?;
                params.insertion_loss_db = 0.0;
                params.channel_loss_db = loss_db.unwrap_or(length_km * coeff);
                Route::Direct { length_km, loss_db }
            }
        };
        params.validate().map_err(|e| invalid(format!("link `{id}`: {e}")))?;
        let mut phase = base_phase;
        if let Some(p) = &l.phase {
            apply_phase(p, &mut phase);
        }
        phase.validate().map_err(|e| invalid(format!("link `{id}`: {e}")))?;
        let estimator = EntropyEstimator {
            kind: l.estimator.unwrap_or_default(),
            security_margin_bits: l
                .security_margin_bits
                .unwrap_or(EntropyEstimator::default().security_margin_bits),
        };
        if !ids.insert(id.clone()) {
            return Err(invalid(format!("duplicate link id `{id}`")));
        }
        if !pairs.insert(unordered(&tx.id, &rx.id)) {
            return Err(invalid(format!("second link between {} and {}", l.tx, l.rx)));
        }
        links.insert(
            id.clone(),
            LinkSpec {
                id,
                tx: tx.id.clone(),
                rx: rx.id.clone(),
                route,
                medium: l.medium.unwrap_or_default(),
                sifting: l.sifting.unwrap_or_default(),
                estimator,
                params,
                phase,
            },
        );
    }

    let mut bridges = BTreeMap::new();
    for b in raw.bridges {
        let a = node(&b.a)?.id.clone();
        let c = node(&b.b)?.id.clone();
        if a == c {
            return Err(invalid(format!("bridge joins `{a}` to itself")));
        }
        let id = LinkId::new(b.id.unwrap_or_else(|| format!("{}-{}", b.a, b.b)));
        if !ids.insert(id.clone()) {
            return Err(invalid(format!("duplicate link id `{id}`")));
        }
        if !pairs.insert(unordered(&a, &c)) {
            return Err(invalid(format!("bridge `{id}` duplicates an existing adjacency")));
        }
        let prepositioned_bits = b.prepositioned_bits.unwrap_or(DEFAULT_AUTH_PREPOSITION_BITS as u64);
        bridges.insert(
            id.clone(),
            Bridge {
                id,
                a,
                b: c,
                prepositioned_bits,
            },
        );
    }

    Ok(Topology {
        name: raw.name.unwrap_or_default(),
        fiber_loss_db_per_km: coeff,
        auth_preposition_bits: raw
            .defaults
            .auth_preposition_bits
            .unwrap_or(DEFAULT_AUTH_PREPOSITION_BITS as u64),
        nodes,
        switches,
        links,
        bridges,
    })
}

fn apply_phase(p: &RawPhase, phase: &mut PhaseState) {
    if let Some(d) = p.drift_rate_rad_per_s {
        phase.drift_rate_rad_per_s = d;
    }
    if let Some(g) = p.feedback_gain {
        phase.feedback_gain = g;
    }
}

fn unordered(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

pub(crate) fn to_raw(t: &Topology) -> RawConfig {
    let port = |p: &Port, side| RawPort {
        node: p.node.to_string(),
        side,
        length_km: p.length_km,
        loss_db: p.loss_db,
    };
    RawConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        name: Some(t.name.clone()),
        defaults: RawDefaults {
            fiber_loss_db_per_km: Some(t.fiber_loss_db_per_km),
            auth_preposition_bits: Some(t.auth_preposition_bits),
            params: None,
            phase: None,
        },
        nodes: t
            .nodes
            .values()
            .map(|n| RawNode {
                id: n.id.to_string(),
                role: n.role,
                trusted: Some(n.trusted),
                site: n.site.clone(),
            })
            .collect(),
        switches: t
            .switches
            .values()
            .map(|s| {
                let (period_s, toggles_s, manual) = match &s.schedule {
                    SwitchSchedule::Periodic { period_s } => (Some(*period_s), None, None),
                    SwitchSchedule::Explicit { toggles_s } => (None, Some(toggles_s.clone()), None),
                    SwitchSchedule::Manual => (None, None, Some(true)),
                };
                RawSwitch {
                    id: s.id.to_string(),
                    insertion_loss_db: Some(s.insertion_loss_db),
                    initial: Some(s.initial),
                    period_s,
                    toggles_s,
                    manual,
                    ports: s
                        .tx_ports
                        .iter()
                        .map(|p| port(p, Side::Tx))
                        .chain(s.rx_ports.iter().map(|p| port(p, Side::Rx)))
                        .collect(),
                }
            })
            .collect(),
        links: t
            .links
            .values()
            .map(|l| {
                let (via, length_km, loss_db) = match &l.route {
                    Route::Switched { switch } => (Some(switch.to_string()), None, None),
                    Route::Direct { length_km, loss_db } => (None, Some(*length_km), *loss_db),
                };
                RawLink {
                    id: Some(l.id.to_string()),
                    tx: l.tx.to_string(),
                    rx: l.rx.to_string(),
                    via,
                    length_km,
                    loss_db,
                    medium: Some(l.medium),
                    sifting: Some(l.sifting),
                    estimator: Some(l.estimator.kind),
                    security_margin_bits: Some(l.estimator.security_margin_bits),
                    params: Some(RawParams::full(&l.params)),
                    phase: Some(RawPhase {
                        drift_rate_rad_per_s: Some(l.phase.drift_rate_rad_per_s),
                        feedback_gain: Some(l.phase.feedback_gain),
                    }),
                }
            })
            .collect(),
        bridges: t
            .bridges
            .values()
            .map(|b| RawBridge {
                id: Some(b.id.to_string()),
                a: b.a.to_string(),
                b: b.b.to_string(),
                prepositioned_bits: Some(b.prepositioned_bits),
            })
            .collect(),
    }
}

/// Canonical TOML for a topology: every value explicit, entries sorted by id.
/// Loading the output gives back an equal topology.
pub fn to_toml(t: &Topology) -> String {
    toml::to_string(&to_raw(t)).expect("topology serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load_and_round_trip() {
        for name in preset_names() {
            let t = preset(name).unwrap();
            let again = load_topology(&to_toml(&t)).unwrap();
            assert_eq!(t, again, "{name}");
            assert_eq!(to_toml(&t), to_toml(&again));
        }
    }

    #[test]
    fn empty_node_list_rejected() {
        assert!(matches!(load_topology("schema_version = 1\n"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn dangling_endpoint_named() {
        let src = r#"
schema_version = 1
[[node]]
id = "A"
role = "tx"
[[link]]
tx = "A"
rx = "X"
length_km = 1.0
"#;
        assert_eq!(load_topology(src), Err(ConfigError::UnknownNode("X".into())));
    }

    #[test]
    fn unknown_key_reports_line() {
        let src = "schema_version = 1\n[[node]]\nid = \"A\"\nrole = \"tx\"\ncolour = \"red\"\n";
        let ConfigError::Parse(msg) = load_topology(src).unwrap_err() else {
            panic!()
        };
        assert!(msg.contains("line 5"), "{msg}");
        assert!(msg.contains("colour"), "{msg}");
    }

    #[test]
    fn wrong_version() {
        assert_eq!(
            load_topology("schema_version = 2\n"),
            Err(ConfigError::Version { found: 2, expected: 1 })
        );
    }
}
