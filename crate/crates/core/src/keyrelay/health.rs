use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::LinkId;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkHealth {
    #[default]
    Up,
    Degraded,
    Cut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealthConfig {
    /// A link with no clicks for this long is declared cut.
    pub cut_window_s: f64,
    /// Block QBER above this counts against the link.
    pub degrade_qber: f64,
    /// Consecutive bad blocks before the link is degraded.
    pub degrade_blocks: u32,
    /// Consecutive clean blocks before a degraded link is trusted again.
    pub recover_blocks: u32,
}

impl Default for HealthConfig {
    fn default() -> Self {
        HealthConfig {
            cut_window_s: 5.0,
            degrade_qber: 0.12,
            degrade_blocks: 3,
            recover_blocks: 3,
        }
    }
}

/// What a QKD session reports about its link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Telemetry {
    /// Detections seen in a frame ending at `at`.
    Clicks {
        at: SimTime,
        count: u64,
    },
    /// QBER of a completed key block.
    Block {
        at: SimTime,
        qber: f64,
    },
    Realign {
        at: SimTime,
        converged: bool,
    },
    AuthFailure {
        at: SimTime,
    },
}

impl Telemetry {
    pub fn at(&self) -> SimTime {
        match *self {
            Telemetry::Clicks { at, .. }
            | Telemetry::Block { at, .. }
            | Telemetry::Realign { at, .. }
            | Telemetry::AuthFailure { at } => at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthTransition {
    pub time: SimTime,
    pub link: LinkId,
    pub from: LinkHealth,
    pub to: LinkHealth,
    pub cause: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Monitor {
    health: LinkHealth,
    last_click: SimTime,
    bad_run: u32,
    clean_run: u32,
    /// Not expected to see light (e.g. switched away); exempt from cut detection.
    paused: bool,
}

/// Health of every monitored link plus the transition history.
///
/// Links that were never registered (bridges, for instance) read as `Up`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkHealthView {
    pub config: HealthConfig,
    monitors: BTreeMap<LinkId, Monitor>,
    log: Vec<HealthTransition>,
}

impl LinkHealthView {
    pub fn new(config: HealthConfig) -> LinkHealthView {
        LinkHealthView {
            config,
            ..LinkHealthView::default()
        }
    }

    /// Start watching `link`; the click window starts at `at`.
    pub fn register(&mut self, link: &LinkId, at: SimTime) {
        self.monitors.entry(link.clone()).or_insert(Monitor {
            last_click: at,
            ..Monitor::default()
        });
    }

    /// Suspend or resume cut detection for `link`. Resuming restarts the
    /// click window at `at`.
    pub fn set_monitored(&mut self, link: &LinkId, on: bool, at: SimTime) {
        self.register(link, at);
        let m = self.monitors.get_mut(link).expect("registered");
        m.paused = !on;
        if on {
            m.last_click = m.last_click.max(at);
        }
    }

    pub fn health(&self, link: &LinkId) -> LinkHealth {
        self.monitors.get(link).map_or(LinkHealth::Up, |m| m.health)
    }

    pub fn is_up(&self, link: &LinkId) -> bool {
        self.health(link) == LinkHealth::Up
    }

    pub fn transitions(&self) -> &[HealthTransition] {
        &self.log
    }

    fn set(&mut self, link: &LinkId, to: LinkHealth, at: SimTime, cause: String) -> Option<HealthTransition> {
        let m = self.monitors.get_mut(link)?;
        if m.health == to {
            return None;
        }
        let t = HealthTransition {
            time: at,
            link: link.clone(),
            from: m.health,
            to,
            cause,
        };
        m.health = to;
        m.bad_run = 0;
        m.clean_run = 0;
        self.log.push(t.clone());
        Some(t)
    }

    /// Force a state, e.g. an operator marking a link down. Logged like any
    /// other transition.
    pub fn force(&mut self, link: &LinkId, to: LinkHealth, at: SimTime, cause: &str) -> Option<HealthTransition> {
        self.register(link, at);
        self.set(link, to, at, cause.to_owned())
    }

    pub fn observe(&mut self, link: &LinkId, t: Telemetry) -> Option<HealthTransition> {
        self.register(link, t.at());
        let cfg = self.config;
        let m = self.monitors.get_mut(link).expect("registered");
        match t {
            Telemetry::Clicks { at, count } => {
                if count == 0 {
                    return None;
                }
                m.last_click = m.last_click.max(at);
                if m.health == LinkHealth::Cut {
                    // light is back, but the link has to earn Up with clean blocks
                    return self.set(link, LinkHealth::Degraded, at, "clicks resumed".into());
                }
                None
            }
            Telemetry::Block { at, qber } => {
                if qber > cfg.degrade_qber {
                    m.bad_run += 1;
                    m.clean_run = 0;
                    if m.health == LinkHealth::Up && m.bad_run >= cfg.degrade_blocks {
                        let cause = format!(
                            "{} consecutive blocks above QBER {} (last {qber:.4})",
                            m.bad_run, cfg.degrade_qber
                        );
                        return self.set(link, LinkHealth::Degraded, at, cause);
                    }
                } else {
                    m.clean_run += 1;
                    m.bad_run = 0;
                    if m.health == LinkHealth::Degraded && m.clean_run >= cfg.recover_blocks {
                        let cause = format!("{} consecutive clean blocks", m.clean_run);
                        return self.set(link, LinkHealth::Up, at, cause);
                    }
                }
                None
            }
            Telemetry::Realign { at, converged } => {
                if converged || m.health != LinkHealth::Up {
                    return None;
                }
                self.set(link, LinkHealth::Degraded, at, "realignment did not converge".into())
            }
            Telemetry::AuthFailure { at } => {
                if m.health == LinkHealth::Cut {
                    return None;
                }
                self.set(link, LinkHealth::Degraded, at, "authentication failure".into())
            }
        }
    }

    /// Declare cut every link whose last click is a full window before `now`.
    pub fn check_idle(&mut self, now: SimTime) -> Vec<HealthTransition> {
        let window = SimTime::from_secs(self.config.cut_window_s);
        let stale: Vec<LinkId> = self
            .monitors
            .iter()
            .filter(|(_, m)| !m.paused && m.health != LinkHealth::Cut && now.saturating_sub(m.last_click) >= window)
            .map(|(id, _)| id.clone())
            .collect();
        let cause = format!("no clicks for {} s", self.config.cut_window_s);
        stale
            .iter()
            .filter_map(|id| self.set(id, LinkHealth::Cut, now, cause.clone()))
            .collect()
    }
}

/// Feed a batch of telemetry into `view` and return the resulting transitions.
pub fn detect_failure(view: &mut LinkHealthView, telemetry: &[(LinkId, Telemetry)]) -> Vec<HealthTransition> {
    let mut out = Vec::new();
    for (link, t) in telemetry {
        out.extend(view.check_idle(t.at()));
        out.extend(view.observe(link, *t));
    }
    out
}
