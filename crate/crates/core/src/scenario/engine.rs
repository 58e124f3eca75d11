//! Discrete-event engine. Every link, switch and relay session is driven by
//! timestamped events popped in (time, insertion order); nothing reads the
//! wall clock and every random draw comes from a stream derived from the
//! scenario seed, so a run is a pure function of the scenario.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::RngCore;
use thiserror::Error;

use super::report::{
    BlockOutcome, BlockRecord, LinkSummary, MetricsReport, PairLevel, RealignRecord, RelayRecord, ReportHeader, Sample,
};
use super::verify::verify_report;
use super::{Action, EngineConfig, Scenario, ScenarioError, SCENARIO_SCHEMA_VERSION};
use crate::bits::{self, Bits};
use crate::ids::{LinkId, NodeId};
use crate::keyrelay::{HopOutcome, LinkHealth, LinkHealthView, RelaySession, SessionStatus, Telemetry};
use crate::keystore::{KeyError, KeyNetwork, Origin, Pool, Purpose};
use crate::netgraph::{LinkSpec, Route, Topology};
use crate::physlink::{advance_phase, apply_training_feedback, transmit_frame, EveModel, LinkParams, PhaseState, PulseFrame};
use crate::qkdproto::{
    auth_tag, distill_block, sift, verify_tag, AuthKey, PipelineConfig, ProtocolError, Sifted, Sifting, AUTH_KEY_BITS,
    AUTH_ROUNDS_PER_BLOCK, MIN_QBER_SAMPLE,
};

use crate::rng;
use crate::switchfab::{
    drift_while_idle, random_phase, rediscover_session, ReceiverState, SimulatedTraining, SwitchState, TrainingChannel,
};
use crate::time::SimTime;

/// Authentication key one distilled block spends.
const BLOCK_AUTH_BITS: u64 = (AUTH_ROUNDS_PER_BLOCK * AUTH_KEY_BITS) as u64;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Invalid(#[from] ScenarioError),
    /// The run finished but broke a security or bookkeeping invariant.
    #[error("invariant violated: {}", .0.join("; "))]
    Invariant(Vec<String>),
}

/// Play `scenario` to its end and collect the metrics.
///
/// Fails with [`RunError::Invariant`] if the key audit, the reservoir
/// mirrors, switch isolation or relay exposure checks do not hold.
pub fn run(scenario: &Scenario) -> Result<MetricsReport, RunError> {
    let sc = scenario.clone().validated()?;
    let mut engine = Engine::new(&sc);
    engine.start();
    while let Some(Reverse((at, _, ev))) = engine.queue.pop() {
        if at > engine.end {
            break;
        }
        engine.now = at;
        engine.handle(ev);
    }
    engine.now = engine.end;
    engine.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Action(usize),
    Frame {
        link: usize,
        gen: u64,
    },
    Realign {
        link: usize,
        gen: u64,
    },
    SwitchTick(usize),
    SwitchSettled(usize),
    Watchdog,
    /// A (possibly repeating) relay request from scenario event `event`.
    RelayRequest {
        event: usize,
    },
    RelayStep {
        id: u64,
    },
    Sample,
}

#[derive(Debug, Default, Clone, Copy)]
struct Window {
    sifted: u64,
    secret: u64,
    qber_weighted: f64,
    qber_bits: u64,
}

struct LinkRun {
    spec: LinkSpec,
    switch: Option<usize>,
    seed: u64,
    enabled: bool,
    cut: bool,
    eve: EveModel,
    sifting: Sifting,
    phase: PhaseState,
    paired_before: bool,
    /// Has a photonic path and is realigning or sending frames.
    active: bool,
    inactive_since: SimTime,
    /// Bumped on every activation change; stale events carry an old value.
    gen: u64,
    epoch: u64,
    frames: u64,
    training_rounds: u64,
    blocks: u64,
    buffer: Sifted,
    buffer_start: SimTime,
    window: Window,
    total: Window,
    clicks: u64,
    discarded: u64,
    auth_bits: u64,
}

impl LinkRun {
    /// Parameters with the current fiber state applied.
    fn channel(&self) -> LinkParams {
        let mut p = self.spec.params;
        if self.cut {
            p.channel_loss_db = f64::INFINITY;
        }
        p
    }

    fn frame_s(&self, slots: usize) -> f64 {
        slots as f64 / self.spec.params.pulse_rate_hz
    }

    fn discard_buffer(&mut self) {
        self.discarded += self.buffer.len() as u64;
        self.buffer = Sifted::default();
    }
}

struct SessionMeta {
    requested: SimTime,
    finished: Option<SimTime>,
}

struct Engine<'a> {
    sc: &'a Scenario,
    topo: &'a Topology,
    cfg: EngineConfig,
    now: SimTime,
    end: SimTime,
    queue: BinaryHeap<Reverse<(SimTime, u64, Ev)>>,
    seq: u64,
    keys: KeyNetwork,
    health: LinkHealthView,
    switches: Vec<SwitchState>,
    links: Vec<LinkRun>,
    /// Last transmitter each receiver node was aligned to.
    peers: BTreeMap<NodeId, NodeId>,
    sessions: BTreeMap<u64, (RelaySession, SessionMeta)>,
    next_session: u64,
    last_sample: SimTime,
    report: MetricsReport,
    errors: Vec<String>,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario) -> Engine<'a> {
        let topo = &sc.topology;
        let switch_ids: Vec<_> = topo.switches.keys().cloned().collect();
        let switches = topo
            .switches
            .values()
            .map(|s| {
                SwitchState::new(
                    s.id.clone(),
                    [s.tx_ports[0].node.clone(), s.tx_ports[1].node.clone()],
                    [s.rx_ports[0].node.clone(), s.rx_ports[1].node.clone()],
                    s.initial,
                    s.schedule.clone(),
                )
                .expect("switch validated with the topology")
            })
            .collect();
        let links = topo
            .links
            .values()
            .map(|l| LinkRun {
                switch: match &l.route {
                    Route::Switched { switch } => switch_ids.iter().position(|s| s == switch),
                    Route::Direct { .. } => None,
                },
                seed: rng::derive_str(sc.seed, &format!("link/{}", l.id)),
                enabled: false,
                cut: false,
                eve: EveModel::None,
                sifting: l.sifting,
                phase: l.phase,
                paired_before: false,
                active: false,
                inactive_since: SimTime::ZERO,
                gen: 0,
                epoch: 0,
                frames: 0,
                training_rounds: 0,
                blocks: 0,
                buffer: Sifted::default(),
                buffer_start: SimTime::ZERO,
                window: Window::default(),
                total: Window::default(),
                clicks: 0,
                discarded: 0,
                auth_bits: 0,
                spec: l.clone(),
            })
            .collect();
        Engine {
            sc,
            topo,
            cfg: sc.engine,
            now: SimTime::ZERO,
            end: SimTime::from_secs(sc.duration_s),
            queue: BinaryHeap::new(),
            seq: 0,
            keys: KeyNetwork::new().with_auth_reserve(BLOCK_AUTH_BITS),
            health: LinkHealthView::new(sc.engine.health),
            switches,
            links,
            peers: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_session: 1,
            last_sample: SimTime::ZERO,
            report: MetricsReport::default(),
            errors: Vec::new(),
        }
    }

    fn push(&mut self, at: SimTime, ev: Ev) {
        if at <= self.end {
            self.seq += 1;
            self.queue.push(Reverse((at, self.seq, ev)));
        }
    }

    fn after(&mut self, dt_s: f64, ev: Ev) {
        let at = self.now + SimTime::from_secs(dt_s);
        self.push(at, ev);
    }

    fn start(&mut self) {
        for node in self.topo.nodes.keys() {
            self.keys.add_node(node);
        }
        for adj in self.topo.adjacencies() {
            self.keys.ensure_pair(&adj.a, &adj.b);
            let auth = self.topo.auth_preposition_bits;
            if auth > 0 {
                let bits = random_bits(rng::derive_str(self.sc.seed, &format!("preposition/auth/{}", adj.id)), auth);
                self.deposit(
                    &adj.a,
                    &adj.b,
                    Pool::Auth,
                    &format!("preposition/auth/{}", adj.id),
                    bits,
                    Origin::Prepositioned,
                );
            }
            if let Some(b) = self.topo.bridges.get(&adj.id).filter(|b| b.prepositioned_bits > 0) {
                let bits = random_bits(
                    rng::derive_str(self.sc.seed, &format!("preposition/key/{}", adj.id)),
                    b.prepositioned_bits,
                );
                self.deposit(
                    &adj.a,
                    &adj.b,
                    Pool::Key,
                    &format!("preposition/key/{}", adj.id),
                    bits,
                    Origin::Prepositioned,
                );
            }
        }
        for s in 0..self.switches.len() {
            let st = &self.switches[s];
            self.report.switch_events.push(crate::switchfab::ConnectivityChange {
                switch: st.id.clone(),
                at: SimTime::ZERO,
                position: st.position,
                busy_until: SimTime::ZERO,
                pairs: st.mapping(st.position).to_vec(),
            });
            if let Some(at) = st.next_toggle() {
                self.push(at, Ev::SwitchTick(s));
            }
        }
        for i in 0..self.sc.events.len() {
            let at = SimTime::from_secs(self.sc.events[i].at_s);
            self.push(at, Ev::Action(i));
        }
        let interval = self.cfg.sample_interval_s;
        self.push(SimTime::from_secs(interval), Ev::Sample);
    }

    fn deposit(&mut self, a: &NodeId, b: &NodeId, pool: Pool, segment: &str, bits: Bits, origin: Origin) {
        if let Err(e) = self.keys.deposit_pair(a, b, pool, segment, bits, origin, self.now) {
            self.errors.push(format!("deposit {segment} for {a}-{b}: {e}"));
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Action(i) => self.action(i),
            Ev::Frame { link, gen } if self.links[link].gen == gen => self.frame(link),
            Ev::Realign { link, gen } if self.links[link].gen == gen => self.realign(link),
            Ev::Frame { .. } | Ev::Realign { .. } => {}
            Ev::SwitchTick(s) => {
                let change = self.switches[s].toggle(self.now);
                self.switches[s].ticks += 1;
                self.switch_moved(s, change);
                if let Some(at) = self.switches[s].next_toggle() {
                    self.push(at, Ev::SwitchTick(s));
                }
            }
            Ev::SwitchSettled(s) => {
                if !self.switches[s].is_busy(self.now) {
                    for i in 0..self.links.len() {
                        if self.links[i].switch == Some(s) {
                            self.try_activate(i);
                        }
                    }
                }
            }
            Ev::Watchdog => {
                self.health.check_idle(self.now);
            }
            Ev::RelayRequest { event } => self.relay_request(event),
            Ev::RelayStep { id } => self.relay_step(id),
            Ev::Sample => {
                self.sample();
                self.after(self.cfg.sample_interval_s, Ev::Sample);
            }
        }
    }

    fn action(&mut self, i: usize) {
        let action = self.sc.events[i].action.clone();
        match action {
            Action::StartQkd { tx, rx } => {
                for l in 0..self.links.len() {
                    let spec = &self.links[l].spec;
                    let hit = match (&tx, &rx) {
                        (Some(a), Some(b)) => (&spec.tx == a && &spec.rx == b) || (&spec.tx == b && &spec.rx == a),
                        _ => true,
                    };
                    if hit && !self.links[l].enabled {
                        self.links[l].enabled = true;
                        self.try_activate(l);
                    }
                }
            }
            Action::RelayRequest { .. } => self.relay_request(i),
            Action::CutLink { link } => match self.link_index(&link) {
                Some(l) => self.links[l].cut = true,
                None => {
                    self.health.force(&link, LinkHealth::Cut, self.now, "bridge withdrawn");
                }
            },
            Action::RestoreLink { link } => match self.link_index(&link) {
                Some(l) => self.links[l].cut = false,
                None => {
                    self.health.force(&link, LinkHealth::Up, self.now, "bridge restored");
                }
            },
            Action::EnableEve { link, eve } => {
                let l = self.link_index(&link).expect("validated");
                self.links[l].eve = eve;
            }
            Action::SwitchToggle { switch } => {
                let s = match switch {
                    Some(id) => self.switches.iter().position(|s| s.id == id).expect("validated"),
                    None => 0,
                };
                let change = self.switches[s].toggle(self.now);
                self.switch_moved(s, change);
            }
            Action::SetSifting { link, sifting } => {
                let l = self.link_index(&link).expect("validated");
                let run = &mut self.links[l];
                run.discard_buffer();
                run.sifting = sifting;
            }
        }
    }

    fn link_index(&self, id: &LinkId) -> Option<usize> {
        self.links.iter().position(|l| &l.spec.id == id)
    }

    fn connected(&self, l: usize) -> bool {
        let run = &self.links[l];
        match run.switch {
            None => true,
            Some(s) => {
                let st = &self.switches[s];
                !st.is_busy(self.now) && st.mapping(st.position).contains(&(run.spec.tx.clone(), run.spec.rx.clone()))
            }
        }
    }

    fn try_activate(&mut self, l: usize) {
        if !self.links[l].enabled || self.links[l].active || !self.connected(l) {
            return;
        }
        let now = self.now;
        let run = &mut self.links[l];
        run.active = true;
        run.gen += 1;
        let seed = rng::derive(rng::derive_str(run.seed, "pairing"), run.epoch);
        run.phase = if run.paired_before {
            drift_while_idle(&run.phase, (now - run.inactive_since).as_secs(), seed)
        } else {
            random_phase(&run.spec.phase, seed)
        };
        run.paired_before = true;
        let (id, gen) = (run.spec.id.clone(), run.gen);
        self.health.set_monitored(&id, true, now);
        self.push(now, Ev::Realign { link: l, gen });
    }

    fn deactivate(&mut self, l: usize) {
        let now = self.now;
        let run = &mut self.links[l];
        if !run.active {
            return;
        }
        run.active = false;
        run.gen += 1;
        run.epoch += 1;
        run.inactive_since = now;
        run.discard_buffer();
        let id = run.spec.id.clone();
        self.health.set_monitored(&id, false, now);
    }

    fn switch_moved(&mut self, s: usize, change: crate::switchfab::ConnectivityChange) {
        let settle = change.busy_until;
        self.report.switch_events.push(change);
        for l in 0..self.links.len() {
            if self.links[l].switch == Some(s) {
                self.deactivate(l);
            }
        }
        self.push(settle, Ev::SwitchSettled(s));
    }

    fn training_channel(&mut self, l: usize) -> SimulatedTraining {
        let run = &mut self.links[l];
        let seed = rng::derive(rng::derive_str(run.seed, "training"), run.training_rounds);
        run.training_rounds += 1;
        SimulatedTraining::new(run.channel(), run.eve, self.cfg.training_slots, seed)
    }

    fn realign(&mut self, l: usize) {
        let mut ch = self.training_channel(l);
        let run = &self.links[l];
        let (tx, rx) = (run.spec.tx.clone(), run.spec.rx.clone());
        let mut state = ReceiverState {
            rx: rx.clone(),
            peer: self.peers.get(&rx).cloned(),
            phase: run.phase,
            pending_raw: 0,
        };
        let outcome = rediscover_session(&mut state, &tx, &mut ch, &self.cfg.realign);
        let spent = ch.frames_sent() as f64 * run.frame_s(self.cfg.training_slots);
        self.peers.insert(rx, tx);
        let run = &mut self.links[l];
        run.phase = state.phase;
        let (id, gen, converged) = (run.spec.id.clone(), run.gen, outcome.converged);
        let frame_s = run.frame_s(self.cfg.frame_slots);
        let switch = run.switch.map(|s| self.switches[s].id.clone());
        self.report.realignments.push(RealignRecord {
            time_s: self.now.as_secs(),
            link_id: id.clone(),
            switch,
            duration_s: spent,
            outcome,
        });
        let done = self.now + SimTime::from_secs(spent);
        self.health.observe(&id, Telemetry::Realign { at: done, converged });
        if converged {
            self.after(spent + frame_s, Ev::Frame { link: l, gen });
        } else {
            self.after(spent + self.cfg.realign_retry_s, Ev::Realign { link: l, gen });
        }
    }

    fn frame(&mut self, l: usize) {
        let cfg = self.cfg;
        let now = self.now;
        let run = &mut self.links[l];
        let frame_s = run.frame_s(cfg.frame_slots);
        let started = now.saturating_sub(SimTime::from_secs(frame_s));
        let fseed = rng::derive(run.seed, run.frames);
        run.phase = advance_phase(&run.phase, frame_s, rng::derive(fseed, 3));
        let pulses = PulseFrame::random(run.frames, cfg.frame_slots, false, &mut rng::rng(rng::derive(fseed, 0)));
        run.frames += 1;
        let params = run.channel();
        let record = match transmit_frame(&params, &run.phase, &run.eve, &pulses, rng::derive(fseed, 1)) {
            Ok(r) => r,
            Err(e) => {
                self.errors.push(format!("link {}: {e}", run.spec.id));
                return;
            }
        };
        run.clicks += record.events.len() as u64;
        let signal = (record.events.len() as u64).saturating_sub(dark_allowance(&params, cfg.frame_slots));
        let sifted = match sift(run.sifting, &pulses, &record, rng::derive(fseed, 2)) {
            Ok(s) => s,
            Err(e) => {
                self.errors.push(format!("link {}: sifting: {e}", run.spec.id));
                return;
            }
        };
        if run.buffer.is_empty() {
            run.buffer_start = started;
        }
        run.window.sifted += sifted.len() as u64;
        run.total.sifted += sifted.len() as u64;
        run.buffer.extend(sifted);
        let (id, gen) = (run.spec.id.clone(), run.gen);

        self.health.observe(&id, Telemetry::Clicks { at: now, count: signal });
        if signal > 0 {
            self.after(self.health.config.cut_window_s, Ev::Watchdog);
        }
        while self.links[l].buffer.len() >= cfg.block_bits {
            self.distill(l, started);
        }

        let mut extra = 0.0;
        if self.links[l].frames % u64::from(cfg.training_interval) == 0 {
            let mut ch = self.training_channel(l);
            let run = &mut self.links[l];
            let phase = run.phase;
            if let Some(q) = ch.measure(&phase) {
                let floor = ch.qber_floor();
                run.phase = apply_training_feedback(&phase, q, floor, |c| ch.measure(&phase.with_error(c)).unwrap_or(1.0)).phase;
            }
            extra = ch.frames_sent() as f64 * run.frame_s(cfg.training_slots);
        }
        self.after(extra + frame_s, Ev::Frame { link: l, gen });
    }

    /// Distill the oldest `block_bits` of the link's buffer. `frame_start`
    /// is when the frame that filled the buffer began.
    fn distill(&mut self, l: usize, frame_start: SimTime) {
        let cfg = self.cfg;
        let now = self.now;
        let run = &mut self.links[l];
        let n = cfg.block_bits;
        let rest = Sifted {
            alice: run.buffer.alice.split_off(n),
            bob: run.buffer.bob.split_off(n),
            kept: run.buffer.kept.split_off(n.min(run.buffer.kept.len())),
        };
        let block = std::mem::replace(&mut run.buffer, rest);
        let start = run.buffer_start;
        if !run.buffer.is_empty() {
            run.buffer_start = frame_start;
        }
        let block_id = run.blocks;
        run.blocks += 1;
        let seed = rng::derive(rng::derive_str(run.seed, "block"), block_id);
        let pipeline = PipelineConfig {
            sifting: run.sifting,
            estimator: run.spec.estimator,
            qber_sample_fraction: cfg.qber_sample_fraction,
            min_qber_sample: MIN_QBER_SAMPLE,
        };
        let params = run.spec.params;
        let (tx, rx, id) = (run.spec.tx.clone(), run.spec.rx.clone(), run.spec.id.clone());
        let via = run.switch.map(|s| self.switches[s].id.clone());
        let epoch = run.epoch;

        let keys = &mut self.keys;
        let mut auth_used = 0u64;
        let ctx = format!("qkd/{id}/{block_id}");
        let result = distill_block(
            &pipeline,
            &params,
            block_id,
            (tx.clone(), rx.clone()),
            &block,
            seed,
            |round, msg| {
                let need = AUTH_KEY_BITS as u64;
                keys.ensure_auth(&tx, &rx, need, now).map_err(starved)?;
                let (a, b) = keys
                    .consume_pair(
                        &tx,
                        &rx,
                        Pool::Auth,
                        need,
                        Purpose::Authentication,
                        now,
                        &format!("{ctx}/{round}"),
                    )
                    .map_err(starved)?;
                auth_used += need;
                let tag = auth_tag(&AuthKey::from_bits(&a.bits)?, msg);
                if !verify_tag(&AuthKey::from_bits(&b.bits)?, msg, tag) {
                    return Err(ProtocolError::AuthFailure);
                }
                Ok(tag)
            },
        );
        self.links[l].auth_bits += auth_used;

        let mut rec = BlockRecord {
            link_id: id.clone(),
            tx: tx.clone(),
            rx: rx.clone(),
            via,
            block_id,
            epoch,
            start_s: start.as_secs(),
            end_s: now.as_secs(),
            sifted_bits: block.len() as u64,
            qber: 0.0,
            reconciled_bits: 0,
            leaked_bits: 0,
            secret_bits: 0,
            outcome: BlockOutcome::Secret,
        };
        let mut qber = None;
        match result {
            Ok(d) => {
                if d.alice.bits() != d.bob.bits() {
                    self.errors
                        .push(format!("block {block_id} on {id}: secret keys differ after verification"));
                }
                rec.qber = d.qber;
                rec.reconciled_bits = d.reconciled_len as u64;
                rec.leaked_bits = d.bits_leaked;
                rec.secret_bits = d.secret_len() as u64;
                qber = Some(d.qber);
                if d.secret_len() > 0 {
                    self.deposit(&tx, &rx, Pool::Key, &ctx, d.alice.bits().to_vec(), Origin::DirectQkd);
                    // the next block is paid for before relays see the key
                    let _ = self.keys.ensure_auth(&tx, &rx, self.keys.auth_reserve_bits, now);
                }
            }
            Err(ProtocolError::UnsupportedRegime { qber_hint, .. }) => {
                rec.qber = qber_hint;
                rec.outcome = BlockOutcome::Rejected;
                qber = Some(qber_hint);
            }
            Err(ProtocolError::ReconciliationFailed { leaked }) => {
                rec.leaked_bits = leaked;
                rec.outcome = BlockOutcome::ReconciliationFailed;
            }
            Err(ProtocolError::AuthStarvation { .. }) => rec.outcome = BlockOutcome::AuthStarved,
            Err(ProtocolError::AuthFailure) => {
                rec.outcome = BlockOutcome::AuthStarved;
                self.health.observe(&id, Telemetry::AuthFailure { at: now });
            }
            Err(e) => {
                self.errors.push(format!("block {block_id} on {id}: {e}"));
                return;
            }
        }
        let run = &mut self.links[l];
        run.window.secret += rec.secret_bits;
        run.total.secret += rec.secret_bits;
        if let Some(q) = qber {
            let n = rec.sifted_bits;
            for w in [&mut run.window, &mut run.total] {
                w.qber_weighted += q * n as f64;
                w.qber_bits += n;
            }
            self.health.observe(&id, Telemetry::Block { at: now, qber: q });
        }
        self.report.blocks.push(rec);
    }

    fn relay_request(&mut self, event: usize) {
        let Action::RelayRequest {
            src,
            dst,
            bits,
            every_s,
            until_s,
        } = self.sc.events[event].action.clone()
        else {
            unreachable!("relay request event");
        };
        if let Some(every) = every_s {
            let next = self.now + SimTime::from_secs(every);
            if until_s.is_none_or(|u| next <= SimTime::from_secs(u)) {
                self.push(next, Ev::RelayRequest { event });
            }
        }
        let id = self.next_session;
        self.next_session += 1;
        let seed = rng::derive(rng::derive_str(self.sc.seed, "relay"), id);
        let session = RelaySession::new(id, src, dst, bits, seed);
        self.sessions.insert(
            id,
            (
                session,
                SessionMeta {
                    requested: self.now,
                    finished: None,
                },
            ),
        );
        self.relay_step(id);
    }

    fn relay_step(&mut self, id: u64) {
        let (topo, now, latency, retry) = (self.topo, self.now, self.cfg.hop_latency_s, self.cfg.relay_retry_s);
        let (s, meta) = self.sessions.get_mut(&id).expect("session exists");
        let next = match s.status {
            SessionStatus::PathPending => match s.plan(topo, &mut self.keys, &self.health, &BTreeSet::new(), now) {
                Ok(()) => Some(latency),
                Err(_) if s.status == SessionStatus::PathPending => Some(retry),
                Err(_) => None,
            },
            SessionStatus::InFlight => {
                let link = s.links[s.position].clone();
                if !self.health.is_up(&link) {
                    match s.reroute(topo, &mut self.keys, &self.health, &BTreeSet::from([link]), now) {
                        Ok(()) => Some(latency),
                        Err(_) if s.status == SessionStatus::PathPending => Some(retry),
                        Err(_) => None,
                    }
                } else {
                    match s.step(&mut self.keys, now, &mut |_| {}) {
                        Ok(HopOutcome::Forwarded { .. }) => Some(latency),
                        Ok(HopOutcome::Delivered) => None,
                        Ok(HopOutcome::Starved { .. }) => Some(retry),
                        Ok(HopOutcome::AuthFailed { link }) => {
                            self.health.observe(&link, Telemetry::AuthFailure { at: now });
                            None
                        }
                        Err(e) => {
                            self.errors.push(format!("relay session {id}: {e}"));
                            None
                        }
                    }
                }
            }
            _ => None,
        };
        // the key must never sit outside the trusted path
        if s.r_length >= 64 && !s.secret().is_empty() {
            let holders = self.keys.holders(s.secret());
            if let Some(n) = holders.iter().find(|n| !s.path.contains(n)) {
                self.errors
                    .push(format!("relay session {id}: key exposed at {n}, off path {:?}", s.path));
            }
        }
        match next {
            Some(dt) => self.after(dt, Ev::RelayStep { id }),
            None => meta.finished = Some(now),
        }
    }

    fn sample(&mut self) {
        let now = self.now;
        let dt = (now - self.last_sample).as_secs();
        self.last_sample = now;
        for run in self.links.iter_mut().filter(|r| r.enabled) {
            let w = std::mem::take(&mut run.window);
            self.report.samples.push(Sample {
                time_s: now.as_secs(),
                link_id: run.spec.id.clone(),
                sifted_bps: w.sifted as f64 / dt,
                qber: (w.qber_bits > 0).then(|| w.qber_weighted / w.qber_bits as f64),
                secret_bps: w.secret as f64 / dt,
                reservoir_bits: self.keys.available(&run.spec.tx, &run.spec.rx, Pool::Key),
            });
        }
        for (a, vault) in &self.keys.vaults {
            for (b, pair) in vault.pairs.range(a.clone()..).filter(|(b, _)| *b > a) {
                self.report.levels.push(PairLevel {
                    time_s: now.as_secs(),
                    a: a.clone(),
                    b: b.clone(),
                    key_bits: pair.key.available(),
                    auth_bits: pair.auth.available(),
                });
            }
        }
    }

    fn finish(mut self) -> Result<MetricsReport, RunError> {
        let duration = self.sc.duration_s;
        let mut report = std::mem::take(&mut self.report);
        report.header = Some(ReportHeader {
            schema_version: SCENARIO_SCHEMA_VERSION,
            scenario: self.sc.name.clone(),
            topology: self.topo.name.clone(),
            seed: self.sc.seed,
            duration_s: duration,
        });
        report.health = self.health.transitions().to_vec();
        report.relays = self
            .sessions
            .values()
            .map(|(s, m)| RelayRecord {
                session_id: s.session_id,
                src: s.src.clone(),
                dst: s.dst.clone(),
                r_length: s.r_length,
                requested_s: m.requested.as_secs(),
                finished_s: m.finished.map(SimTime::as_secs),
                status: s.status,
                path: s.path.clone(),
                attempts: s.attempts,
                hops: s.hop_transcripts.len() as u32,
                written_off_bits: s.written_off().map(|h| h.key_offsets.end - h.key_offsets.start).sum(),
                cause: s.cause.clone(),
            })
            .collect();
        report.links = self
            .links
            .iter()
            .map(|r| LinkSummary {
                link_id: r.spec.id.clone(),
                tx: r.spec.tx.clone(),
                rx: r.spec.rx.clone(),
                frames: r.frames,
                clicks: r.clicks,
                sifted_bits: r.total.sifted,
                discarded_bits: r.discarded,
                blocks: r.blocks,
                secret_bits: r.total.secret,
                mean_qber: (r.total.qber_bits > 0).then(|| r.total.qber_weighted / r.total.qber_bits as f64),
                secret_bps: r.total.secret as f64 / duration,
                auth_bits: r.auth_bits,
            })
            .collect();
        let mut errors = std::mem::take(&mut self.errors);
        if let Err(e) = self.keys.mirrors_hold() {
            errors.push(e);
        }
        report.audit = std::mem::take(&mut self.keys.audit);
        if let Err(v) = verify_report(&report) {
            errors.extend(v);
        }
        if errors.is_empty() {
            Ok(report)
        } else {
            Err(RunError::Invariant(errors))
        }
    }
}

fn starved(e: KeyError) -> ProtocolError {
    match e {
        KeyError::Starvation { requested, available } => ProtocolError::AuthStarvation { requested, available },
        other => ProtocolError::InvalidArgument(other.to_string()),
    }
}

/// Clicks per frame that dark counts alone could plausibly produce: mean
/// plus five standard deviations. Only clicks above this count as light on
/// the fiber for cut detection.
fn dark_allowance(params: &LinkParams, slots: usize) -> u64 {
    let mean = params.dark_probability() * slots as f64;
    (mean + 5.0 * mean.sqrt() + 1.0).floor() as u64
}

fn random_bits(seed: u64, n: u64) -> Bits {
    let mut g = rng::rng(seed);
    let words: Vec<u64> = (0..n.div_ceil(64)).map(|_| g.next_u64()).collect();
    bits::unpack(&words, n as usize)
}
