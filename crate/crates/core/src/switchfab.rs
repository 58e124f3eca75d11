//! The 2x2 passive optical switch and receiver realignment after a change.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{NodeId, SwitchId};
use crate::physlink::{
    advance_phase, apply_training_feedback, training_qber, transmit_frame, EveModel, LinkParams, PhaseState, PhysError,
    PulseFrame,
};
use crate::rng;
use crate::time::SimTime;

/// Optical transition time during which no photons pass.
pub const SWITCH_BUSY: SimTime = SimTime(8_000_000);
/// Width of the electrical actuation pulse. Recorded, not modelled.
pub const ACTUATION_PULSE_MS: f64 = 20.0;
pub const DEFAULT_SWITCH_PERIOD_S: f64 = 900.0;
pub const DEFAULT_INSERTION_LOSS_DB: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchPosition {
    /// tx port 0 to rx port 0, tx port 1 to rx port 1.
    Bar,
    /// tx port 0 to rx port 1, tx port 1 to rx port 0.
    Cross,
}

impl SwitchPosition {
    pub fn toggled(self) -> SwitchPosition {
        match self {
            SwitchPosition::Bar => SwitchPosition::Cross,
            SwitchPosition::Cross => SwitchPosition::Bar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SwitchSchedule {
    /// Toggle at every multiple of `period_s`.
    Periodic { period_s: f64 },
    /// Toggle at these times (seconds, ascending).
    Explicit { toggles_s: Vec<f64> },
    /// Only toggled by explicit scenario events.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SwitchError {
    #[error("{node} is not a transmitter port of switch {switch}")]
    UnknownPort { switch: SwitchId, node: NodeId },
    #[error("switch {0}: {1}")]
    Config(SwitchId, String),
}

/// What a transmitter port currently reaches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathResolution {
    Connected(NodeId),
    Blocked,
}

/// Emitted whenever the switch moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityChange {
    pub switch: SwitchId,
    pub at: SimTime,
    pub position: SwitchPosition,
    pub busy_until: SimTime,
    /// (tx, rx) pairs once the transition completes.
    pub pairs: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchState {
    pub id: SwitchId,
    pub tx_ports: [NodeId; 2],
    pub rx_ports: [NodeId; 2],
    pub position: SwitchPosition,
    pub busy_until: SimTime,
    pub schedule: SwitchSchedule,
    /// Number of scheduled toggles applied so far.
    pub ticks: u64,
}

impl SwitchState {
    pub fn new(
        id: SwitchId,
        tx_ports: [NodeId; 2],
        rx_ports: [NodeId; 2],
        position: SwitchPosition,
        schedule: SwitchSchedule,
    ) -> Result<SwitchState, SwitchError> {
        let distinct = tx_ports[0] != tx_ports[1] && rx_ports[0] != rx_ports[1] && !tx_ports.iter().any(|t| rx_ports.contains(t));
        if !distinct {
            return Err(SwitchError::Config(
                id,
                "the four ports must be bound to distinct nodes".into(),
            ));
        }
        match &schedule {
            SwitchSchedule::Periodic { period_s } if !(*period_s > 0.0 && period_s.is_finite()) => {
                return Err(SwitchError::Config(id, format!("period {period_s} must be positive")));
            }
            SwitchSchedule::Explicit { toggles_s }
                if toggles_s.windows(2).any(|w| w[1] <= w[0]) || toggles_s.iter().any(|t| !(*t >= 0.0)) =>
            {
                return Err(SwitchError::Config(
                    id,
                    "toggle times must be non-negative and strictly increasing".into(),
                ));
            }
            _ => {}
        }
        Ok(SwitchState {
            id,
            tx_ports,
            rx_ports,
            position,
            busy_until: SimTime::ZERO,
            schedule,
            ticks: 0,
        })
    }

    /// The (tx, rx) matching at a position.
    pub fn mapping(&self, position: SwitchPosition) -> [(NodeId, NodeId); 2] {
        let [t0, t1] = &self.tx_ports;
        let [r0, r1] = &self.rx_ports;
        match position {
            SwitchPosition::Bar => [(t0.clone(), r0.clone()), (t1.clone(), r1.clone())],
            SwitchPosition::Cross => [(t0.clone(), r1.clone()), (t1.clone(), r0.clone())],
        }
    }

    pub fn is_busy(&self, now: SimTime) -> bool {
        now < self.busy_until
    }

    /// True if `node` is bound to any port.
    pub fn has_port(&self, node: &NodeId) -> bool {
        self.tx_ports.contains(node) || self.rx_ports.contains(node)
    }

    /// Time of the next scheduled toggle after `ticks` have been applied.
    pub fn next_toggle(&self) -> Option<SimTime> {
        match &self.schedule {
            SwitchSchedule::Periodic { period_s } => Some(SimTime::from_secs(period_s * (self.ticks + 1) as f64)),
            SwitchSchedule::Explicit { toggles_s } => toggles_s.get(self.ticks as usize).map(|&t| SimTime::from_secs(t)),
            SwitchSchedule::Manual => None,
        }
    }

    /// Flip the switch now, opening a busy window.
    pub fn toggle(&mut self, now: SimTime) -> ConnectivityChange {
        self.position = self.position.toggled();
        self.busy_until = now + SWITCH_BUSY;
        ConnectivityChange {
            switch: self.id.clone(),
            at: now,
            position: self.position,
            busy_until: self.busy_until,
            pairs: self.mapping(self.position).to_vec(),
        }
    }
}

pub fn resolve_path(state: &SwitchState, tx: &NodeId, now: SimTime) -> Result<PathResolution, SwitchError> {
    if !state.tx_ports.contains(tx) {
        return Err(SwitchError::UnknownPort {
            switch: state.id.clone(),
            node: tx.clone(),
        });
    }
    if state.is_busy(now) {
        return Ok(PathResolution::Blocked);
    }
    let rx = state
        .mapping(state.position)
        .into_iter()
        .find(|(t, _)| t == tx)
        .map(|(_, r)| r)
        .unwrap();
    Ok(PathResolution::Connected(rx))
}

/// Apply every scheduled toggle due at or before `now`.
pub fn schedule_tick(state: &SwitchState, now: SimTime) -> (SwitchState, Vec<ConnectivityChange>) {
    let mut s = state.clone();
    let mut changes = Vec::new();
    while let Some(at) = s.next_toggle().filter(|&at| at <= now) {
        changes.push(s.toggle(at));
        s.ticks += 1;
    }
    (s, changes)
}

/// Source of training-frame QBER readings for a receiver realigning to a
/// transmitter. Each call represents one training frame.
pub trait TrainingChannel {
    /// QBER of one training frame at the given phase error, or `None` when
    /// the frame produced no matched-basis clicks.
    fn measure(&mut self, phase: &PhaseState) -> Option<f64>;
    /// QBER the link shows with perfect phase alignment.
    fn qber_floor(&self) -> f64;
}

/// Expected QBER with no statistical noise: floor plus phase contribution.
#[derive(Debug, Clone, Copy)]
pub struct NoiselessTraining {
    pub floor: f64,
}

impl TrainingChannel for NoiselessTraining {
    fn measure(&mut self, phase: &PhaseState) -> Option<f64> {
        Some((self.floor + phase.flip_probability()).min(0.5))
    }

    fn qber_floor(&self) -> f64 {
        self.floor
    }
}

/// Training frames pushed through the link simulator.
#[derive(Debug, Clone)]
pub struct SimulatedTraining {
    pub params: LinkParams,
    pub eve: EveModel,
    pub frame_slots: usize,
    pub seed: u64,
    frames: u64,
}

impl SimulatedTraining {
    pub fn new(params: LinkParams, eve: EveModel, frame_slots: usize, seed: u64) -> SimulatedTraining {
        SimulatedTraining {
            params,
            eve,
            frame_slots,
            seed,
            frames: 0,
        }
    }

    pub fn frames_sent(&self) -> u64 {
        self.frames
    }

    fn try_measure(&mut self, phase: &PhaseState) -> Result<Option<f64>, PhysError> {
        let seed = rng::derive(self.seed, self.frames);
        self.frames += 1;
        let frame = PulseFrame::random(seed, self.frame_slots, true, &mut rng::rng(rng::derive(seed, 1)));
        let rec = transmit_frame(&self.params, phase, &self.eve, &frame, rng::derive(seed, 2))?;
        Ok(training_qber(&frame, &rec))
    }
}

impl TrainingChannel for SimulatedTraining {
    fn measure(&mut self, phase: &PhaseState) -> Option<f64> {
        // parameters were validated when the link was configured
        self.try_measure(phase).expect("training frame rejected by link simulator")
    }

    fn qber_floor(&self) -> f64 {
        self.params.qber_floor()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealignConfig {
    pub qber_threshold: f64,
    pub frame_budget: u32,
}

impl Default for RealignConfig {
    fn default() -> Self {
        RealignConfig {
            qber_threshold: 0.05,
            frame_budget: 200,
        }
    }
}

/// Receiver-side state that survives across pairings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverState {
    pub rx: NodeId,
    pub peer: Option<NodeId>,
    pub phase: PhaseState,
    /// Raw detections not yet sifted; dropped on a pairing change.
    pub pending_raw: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealignOutcome {
    pub peer: NodeId,
    pub frames_spent: u32,
    pub residual_phase_rad: f64,
    pub final_qber: Option<f64>,
    pub converged: bool,
    pub discarded_raw: u64,
}

/// Re-key the receiver to `new_tx` and run training frames until the
/// training QBER drops below the threshold or the budget runs out. A
/// non-converged outcome means the link should be marked degraded.
pub fn rediscover_session<C: TrainingChannel>(
    rx: &mut ReceiverState,
    new_tx: &NodeId,
    channel: &mut C,
    cfg: &RealignConfig,
) -> RealignOutcome {
    let discarded_raw = std::mem::take(&mut rx.pending_raw);
    let same_peer = rx.peer.as_ref() == Some(new_tx);
    rx.peer = Some(new_tx.clone());
    let floor = channel.qber_floor();
    let mut frames = 1u32;
    let mut q = channel.measure(&rx.phase);
    if !same_peer || !q.is_some_and(|q| q < cfg.qber_threshold) {
        loop {
            if q.is_some_and(|q| q < cfg.qber_threshold) || frames >= cfg.frame_budget {
                break;
            }
            match q {
                Some(reading) => {
                    let mut spent = 0u32;
                    let budget = cfg.frame_budget - frames;
                    let fb = apply_training_feedback(&rx.phase, reading, floor, |candidate| {
                        if spent >= budget {
                            return 1.0;
                        }
                        spent += 1;
                        channel.measure(&rx.phase.with_error(candidate)).unwrap_or(1.0)
                    });
                    frames += spent;
                    rx.phase = fb.phase;
                    q = Some(fb.qber);
                    if spent == 0 || fb.qber >= reading {
                        // no improvement from the probes: take a fresh reading
                        if frames < cfg.frame_budget {
                            frames += 1;
                            q = channel.measure(&rx.phase);
                        }
                    }
                }
                None => {
                    frames += 1;
                    q = channel.measure(&rx.phase);
                }
            }
        }
    }
    RealignOutcome {
        peer: new_tx.clone(),
        frames_spent: frames,
        residual_phase_rad: rx.phase.phase_error_rad,
        final_qber: q,
        converged: q.is_some_and(|q| q < cfg.qber_threshold),
        discarded_raw,
    }
}

/// Phase mismatch with a transmitter after `idle_s` seconds without
/// training, starting from `phase`.
pub fn drift_while_idle(phase: &PhaseState, idle_s: f64, seed: u64) -> PhaseState {
    advance_phase(phase, idle_s.max(0.0), seed)
}

/// A uniformly random phase mismatch, used for a first pairing.
pub fn random_phase(template: &PhaseState, seed: u64) -> PhaseState {
    let x: f64 = rng::rng(seed).random_range(-PI..PI);
    template.with_error(if x == -PI { PI } else { x })
}
