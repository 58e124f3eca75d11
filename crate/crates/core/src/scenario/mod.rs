//! Scenario files and the deterministic network simulation that runs them.
//!
//! A scenario names a topology, a duration, a seed and a list of timed
//! events. [`run`] plays it out in simulated time and returns a
//! [`MetricsReport`]; the same scenario and seed always give the same report,
//! byte for byte once emitted.

mod engine;
mod report;
mod verify;

pub use engine::{run, RunError};
pub use report::{
    emit, load_records, read_records, write_csv, write_records, BlockOutcome, BlockRecord, LinkSummary, MetricsReport,
    OutputFormat, PairLevel, RealignRecord, RelayRecord, ReportHeader, ReportRecord, Sample, CSV_COLUMNS,
};
pub use verify::{verify_report, VerifySummary};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{LinkId, NodeId, SwitchId};
use crate::keyrelay::HealthConfig;
use crate::netgraph::{self, ConfigError, Topology};
use crate::physlink::EveModel;
use crate::qkdproto::Sifting;
use crate::switchfab::RealignConfig;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("unsupported scenario schema_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{0}")]
    Invalid(String),
    #[error("topology: {0}")]
    Topology(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// Simulation knobs. Every field has a default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Slots per data frame.
    pub frame_slots: usize,
    /// Slots per training frame.
    pub training_slots: usize,
    /// One training step before every this many data frames.
    pub training_interval: u32,
    /// Sifted bits per key block.
    pub block_bits: usize,
    pub qber_sample_fraction: f64,
    /// Spacing of metric samples.
    pub sample_interval_s: f64,
    /// Delay between consecutive relay hops.
    pub hop_latency_s: f64,
    /// Wait before retrying a starved or path-less relay session.
    pub relay_retry_s: f64,
    /// Wait before retrying a failed realignment.
    pub realign_retry_s: f64,
    pub health: HealthConfig,
    pub realign: RealignConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            frame_slots: 1 << 20,
            training_slots: 1 << 20,
            training_interval: 16,
            block_bits: 8192,
            qber_sample_fraction: 0.1,
            sample_interval_s: 10.0,
            hop_latency_s: 0.05,
            relay_retry_s: 1.0,
            realign_retry_s: 5.0,
            health: HealthConfig::default(),
            realign: RealignConfig::default(),
        }
    }
}

impl EngineConfig {
    fn validate(&self) -> Result<(), ScenarioError> {
        let positive = [
            ("sample_interval_s", self.sample_interval_s),
            ("relay_retry_s", self.relay_retry_s),
            ("realign_retry_s", self.realign_retry_s),
            ("health.cut_window_s", self.health.cut_window_s),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("engine.{k} must be positive, got {v}")));
            }
        }
        if !(self.hop_latency_s.is_finite() && self.hop_latency_s >= 0.0) {
            return Err(invalid(format!(
                "engine.hop_latency_s must be >= 0, got {}",
                self.hop_latency_s
            )));
        }
        if self.frame_slots == 0 || self.training_slots == 0 || self.training_interval == 0 {
            return Err(invalid("engine frame sizes and training_interval must be positive"));
        }
        if self.block_bits < 1024 {
            return Err(invalid(format!(
                "engine.block_bits must be at least 1024, got {}",
                self.block_bits
            )));
        }
        if !(self.qber_sample_fraction > 0.0 && self.qber_sample_fraction < 1.0) {
            return Err(invalid("engine.qber_sample_fraction must lie in (0, 1)"));
        }
        let sample = (self.block_bits as f64 * self.qber_sample_fraction).round() as usize;
        if sample < crate::qkdproto::MIN_QBER_SAMPLE {
            return Err(invalid(format!(
                "engine.block_bits x qber_sample_fraction gives a {sample}-bit QBER sample, below the minimum of {}",
                crate::qkdproto::MIN_QBER_SAMPLE
            )));
        }
        if self.health.degrade_blocks == 0 || self.health.recover_blocks == 0 || self.realign.frame_budget == 0 {
            return Err(invalid(
                "engine health block counts and realign.frame_budget must be positive",
            ));
        }
        Ok(())
    }
}

/// Something that happens at a point in simulated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Start generating key on the link between `tx` and `rx`, or on every
    /// link when both are omitted.
    StartQkd {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tx: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rx: Option<NodeId>,
    },
    /// Relay `bits` of fresh key from `src` to `dst`. With `every_s` the
    /// request repeats until `until_s` (default: end of run).
    RelayRequest {
        src: NodeId,
        dst: NodeId,
        bits: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        every_s: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        until_s: Option<f64>,
    },
    /// Sever the fiber (or withdraw a bridge).
    CutLink {
        link: LinkId,
    },
    RestoreLink {
        link: LinkId,
    },
    EnableEve {
        link: LinkId,
        eve: EveModel,
    },
    /// Flip a switch now. `switch` may be omitted when there is only one.
    SwitchToggle {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        switch: Option<SwitchId>,
    },
    SetSifting {
        link: LinkId,
        sifting: Sifting,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub at_s: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopologyRef {
    preset: Option<String>,
    file: Option<PathBuf>,
    inline: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema_version: u32,
    #[serde(default)]
    name: Option<String>,
    duration_s: f64,
    #[serde(default)]
    seed: u64,
    topology: RawTopologyRef,
    #[serde(default)]
    engine: EngineConfig,
    #[serde(rename = "event", default)]
    events: Vec<toml::Table>,
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub duration_s: f64,
    pub seed: u64,
    pub topology: Topology,
    pub engine: EngineConfig,
    /// Sorted by time; ties keep file order.
    pub events: Vec<Event>,
}

impl Scenario {
    /// A scenario with no events on `topology`.
    pub fn new(topology: Topology, duration_s: f64, seed: u64) -> Scenario {
        Scenario {
            name: String::new(),
            duration_s,
            seed,
            topology,
            engine: EngineConfig::default(),
            events: Vec::new(),
        }
    }

    pub fn at(mut self, at_s: f64, action: Action) -> Scenario {
        self.events.push(Event { at_s, action });
        self
    }

    /// Parse scenario text. A `topology.file` is resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if raw.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::Version {
                found: raw.schema_version,
                expected: SCENARIO_SCHEMA_VERSION,
            });
        }
        let t = raw.topology;
        let topology = match (t.preset, t.file, t.inline) {
            (Some(p), None, None) => netgraph::preset(&p)?,
            (None, Some(f), None) => {
                let path = base_dir.join(f);
                let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                    path: path.clone(),
                    source,
                })?;
                netgraph::load_topology(&text)?
            }
            (None, None, Some(table)) => netgraph::load_topology_table(table)?,
            _ => return Err(invalid("[topology] needs exactly one of `preset`, `file` or `inline`")),
        };
        let mut events = Vec::with_capacity(raw.events.len());
        for (i, mut table) in raw.events.into_iter().enumerate() {
            let at = table
                .remove("at_s")
                .ok_or_else(|| invalid(format!("event {}: missing `at_s`", i + 1)))?;
            let at_s = at
                .as_float()
                .or_else(|| at.as_integer().map(|v| v as f64))
                .ok_or_else(|| invalid(format!("event {}: `at_s` must be a number", i + 1)))?;
            let action: Action = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| ScenarioError::Parse(format!("event {}: {}", i + 1, e.message())))?;
            events.push(Event { at_s, action });
        }
        let s = Scenario {
            name: raw.name.unwrap_or_default(),
            duration_s: raw.duration_s,
            seed: raw.seed,
            topology,
            engine: raw.engine,
            events,
        };
        s.validated()
    }

    pub fn from_file(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        Scenario::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Check references and timing; sorts events.
    pub fn validated(mut self) -> Result<Scenario, ScenarioError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(invalid(format!("duration_s must be positive, got {}", self.duration_s)));
        }
        self.engine.validate()?;
        let topo = &self.topology;
        let node = |n: &NodeId| topo.node(n).map(|_| ()).ok_or_else(|| invalid(format!("unknown node `{n}`")));
        let link = |l: &LinkId| {
            if topo.links.contains_key(l) || topo.bridges.contains_key(l) {
                Ok(())
            } else {
                Err(invalid(format!("unknown link `{l}`")))
            }
        };
        let qkd_link = |l: &LinkId| {
            topo.link(l)
                .map(|_| ())
                .ok_or_else(|| invalid(format!("unknown QKD link `{l}`")))
        };
        for (i, e) in self.events.iter().enumerate() {
            let ctx = |err: ScenarioError| invalid(format!("event {} at {} s: {err}", i + 1, e.at_s));
            if !(e.at_s.is_finite() && e.at_s >= 0.0 && e.at_s <= self.duration_s) {
                return Err(ctx(invalid(format!("time outside [0, {}]", self.duration_s))));
            }
            match &e.action {
                Action::StartQkd { tx, rx } => match (tx, rx) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        node(a).map_err(ctx)?;
                        node(b).map_err(ctx)?;
                        topo.link_between(a, b)
                            .ok_or_else(|| ctx(invalid(format!("no QKD link between {a} and {b}"))))?;
                    }
                    _ => return Err(ctx(invalid("give both `tx` and `rx`, or neither"))),
                },
                Action::RelayRequest {
                    src,
                    dst,
                    bits,
                    every_s,
                    until_s,
                } => {
                    node(src).map_err(ctx)?;
                    node(dst).map_err(ctx)?;
                    if src == dst || *bits == 0 {
                        return Err(ctx(invalid("relay needs distinct endpoints and a positive bit count")));
                    }
                    if every_s.is_some_and(|v| !(v.is_finite() && v > 0.0)) {
                        return Err(ctx(invalid("`every_s` must be positive")));
                    }
                    if until_s.is_some() && every_s.is_none() {
                        return Err(ctx(invalid("`until_s` only applies with `every_s`")));
                    }
                }
                Action::CutLink { link: l } | Action::RestoreLink { link: l } => link(l).map_err(ctx)?,
                Action::EnableEve { link: l, eve } => {
                    qkd_link(l).map_err(ctx)?;
                    eve.validate().map_err(|e| ctx(invalid(e.to_string())))?;
                }
                Action::SetSifting { link: l, .. } => qkd_link(l).map_err(ctx)?,
                Action::SwitchToggle { switch } => match switch {
                    Some(s) if !topo.switches.contains_key(s) => return Err(ctx(invalid(format!("unknown switch `{s}`")))),
                    None if topo.switches.len() != 1 => {
                        return Err(ctx(invalid("name the switch: the topology does not have exactly one")))
                    }
                    _ => {}
                },
            }
        }
        self.events.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
        Ok(self)
    }
}
