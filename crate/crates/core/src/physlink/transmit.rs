use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Geometric};

use super::eve::pns_strategy;
use super::frame::{Detection, DetectionRecord, PulseFrame};
use super::{EveModel, LinkParams, PhaseState, PhysError};
use crate::rng::{self, SimRng};

/// Resource guard: frames larger than this are rejected.
pub const DEFAULT_MAX_FRAME_SLOTS: usize = 1 << 26;

/// Photon-number tail mass ignored when tabulating slot outcomes.
const TAIL: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct SignalClass {
    detected: u32,
    intercepted: bool,
    split: bool,
    multi: bool,
}

/// Per-slot outcome distribution for a fixed (params, phase, eve).
///
/// All armed slots are i.i.d., so the simulator jumps geometrically from one
/// firing gate to the next and samples the firing gate's contents from the
/// conditional distribution.
struct SlotModel {
    p_fire: f64,
    p_signal: f64,
    dark: f64,
    /// Signal classes with cumulative (unnormalised) probability.
    classes: Vec<(f64, SignalClass)>,
    multi_given_quiet: f64,
    p_multi: f64,
    flip: f64,
}

fn binomial_pmf(m: u32, k: u32, q: f64) -> f64 {
    if q <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if q >= 1.0 {
        return if k == m { 1.0 } else { 0.0 };
    }
    let mut c = 1.0;
    for i in 0..k {
        c *= f64::from(m - i) / f64::from(i + 1);
    }
    c * q.powi(k as i32) * (1.0 - q).powi((m - k) as i32)
}

impl SlotModel {
    fn new(params: &LinkParams, phase: &PhaseState, eve: &EveModel) -> SlotModel {
        let mu = params.mean_photon_number;
        let t = params.transmittance();
        let eta = params.detector_efficiency;
        let (pns_block, pns_t) = pns_strategy(mu, t, eta);

        let mut classes: BTreeMap<SignalClass, f64> = BTreeMap::new();
        let mut quiet = 0.0;
        let mut quiet_multi = 0.0;
        let mut p_multi = 0.0;

        let mut pn = (-mu).exp();
        let mut cumulative = 0.0;
        let mut n: u32 = 0;
        loop {
            let multi = n >= 2;
            if multi {
                p_multi += pn;
            }
            // (weight, photons reaching the receiver's detectors, per-photon transmittance, intercepted, split)
            let branches: Vec<(f64, u32, f64, bool, bool)> = match *eve {
                EveModel::None => vec![(1.0, n, t, false, false)],
                EveModel::InterceptResend { fraction } if n >= 1 => {
                    vec![(fraction, n, t, true, false), (1.0 - fraction, n, t, false, false)]
                }
                EveModel::InterceptResend { .. } => vec![(1.0, 0, t, false, false)],
                EveModel::PhotonNumberSplit => match n {
                    0 => vec![(1.0, 0, t, false, false)],
                    1 => vec![(1.0 - pns_block, 1, pns_t, false, false), (pns_block, 0, pns_t, false, false)],
                    _ => vec![(1.0, n - 1, pns_t, false, true)],
                },
            };
            for (w, m, tx, intercepted, split) in branches {
                if w == 0.0 {
                    continue;
                }
                let q = tx * eta;
                for k in 0..=m {
                    let p = pn * w * binomial_pmf(m, k, q);
                    if p == 0.0 {
                        continue;
                    }
                    if k == 0 {
                        quiet += p;
                        if multi {
                            quiet_multi += p;
                        }
                    } else {
                        *classes
                            .entry(SignalClass {
                                detected: k,
                                intercepted,
                                split,
                                multi,
                            })
                            .or_insert(0.0) += p;
                    }
                }
            }
            cumulative += pn;
            n += 1;
            pn *= mu / f64::from(n);
            if 1.0 - cumulative < TAIL || pn == 0.0 || n > 400 {
                break;
            }
        }

        let mut acc = 0.0;
        let classes: Vec<(f64, SignalClass)> = classes
            .into_iter()
            .map(|(c, p)| {
                acc += p;
                (acc, c)
            })
            .collect();
        let p_signal = acc;
        let d = params.dark_count_prob;
        let p_fire = 1.0 - (1.0 - p_signal) * (1.0 - d) * (1.0 - d);
        let flip = (params.intrinsic_error + phase.flip_probability()).min(1.0);
        SlotModel {
            p_fire,
            p_signal,
            dark: d,
            classes,
            multi_given_quiet: if quiet > 0.0 { quiet_multi / quiet } else { 0.0 },
            p_multi,
            flip,
        }
    }

    fn sample_class(&self, rng: &mut SimRng) -> SignalClass {
        let u = rng.random::<f64>() * self.p_signal;
        let idx = self.classes.partition_point(|(c, _)| *c <= u).min(self.classes.len() - 1);
        self.classes[idx].1
    }

    /// Dark clicks on (D0, D1) given that at least one fired.
    fn sample_dark_only(&self, rng: &mut SimRng) -> [bool; 2] {
        let d = self.dark;
        let both = d * d;
        let one = d * (1.0 - d);
        let u = rng.random::<f64>() * (both + 2.0 * one);
        if u < one {
            [true, false]
        } else if u < 2.0 * one {
            [false, true]
        } else {
            [true, true]
        }
    }
}

fn binomial(n: u64, p: f64, rng: &mut SimRng) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Simulate one frame through the link.
///
/// Identical inputs give an identical record.
pub fn transmit_frame(
    params: &LinkParams,
    phase: &PhaseState,
    eve: &EveModel,
    frame: &PulseFrame,
    rng_seed: u64,
) -> Result<DetectionRecord, PhysError> {
    transmit_frame_with_limit(params, phase, eve, frame, rng_seed, DEFAULT_MAX_FRAME_SLOTS)
}

pub fn transmit_frame_with_limit(
    params: &LinkParams,
    phase: &PhaseState,
    eve: &EveModel,
    frame: &PulseFrame,
    rng_seed: u64,
    max_slots: usize,
) -> Result<DetectionRecord, PhysError> {
    params.validate()?;
    eve.validate()?;
    phase.validate()?;
    if frame.is_empty() {
        return Err(PhysError::EmptyFrame);
    }
    if frame.len() > max_slots {
        return Err(PhysError::FrameTooLarge {
            slots: frame.len(),
            limit: max_slots,
        });
    }

    let model = SlotModel::new(params, phase, eve);
    let mut rng = rng::rng(rng_seed);
    let len = frame.len() as u64;
    let dead = params.dead_slots();

    let mut events = Vec::new();
    let mut double_clicks = 0u64;
    let mut emissions = 0u64;

    if model.p_fire <= 0.0 {
        emissions = binomial(len, model.p_multi, &mut rng);
        return Ok(DetectionRecord::from_parts(frame.frame_id, len, events, 0, emissions));
    }
    let gaps = Geometric::new(model.p_fire).expect("p_fire in (0, 1]");

    let mut slot = 0u64;
    while slot < len {
        let gap = gaps.sample(&mut rng);
        if gap >= len - slot {
            emissions += binomial(len - slot, model.multi_given_quiet, &mut rng);
            break;
        }
        emissions += binomial(gap, model.multi_given_quiet, &mut rng);
        let at = slot + gap;
        let (tx_basis, tx_value) = frame.slot(at as usize);
        let rx_basis: u8 = rng.random_range(0..2);

        let mut fired = [false; 2];
        let mut signal = false;
        let mut eve_knows = false;
        if rng.random::<f64>() * model.p_fire < model.p_signal {
            let class = model.sample_class(&mut rng);
            if class.multi {
                emissions += 1;
            }
            let (state_basis, state_value) = if class.intercepted {
                let eve_basis: u8 = rng.random_range(0..2);
                let eve_value = if eve_basis == tx_basis {
                    tx_value
                } else {
                    rng.random_range(0..2)
                };
                eve_knows = eve_basis == tx_basis;
                (eve_basis, eve_value)
            } else {
                (tx_basis, tx_value)
            };
            eve_knows |= class.split;
            for _ in 0..class.detected {
                let det = if rx_basis == state_basis {
                    state_value ^ u8::from(rng.random::<f64>() < model.flip)
                } else {
                    rng.random_range(0..2)
                };
                fired[det as usize] = true;
            }
            signal = true;
            for f in &mut fired {
                if rng.random::<f64>() < model.dark {
                    *f = true;
                }
            }
        } else {
            // Quiet-photon gate: only the dark-count draw fired, so whether
            // this slot held a (lost) multi-photon pulse is still open.
            if rng.random::<f64>() < model.multi_given_quiet {
                emissions += 1;
            }
            fired = model.sample_dark_only(&mut rng);
        }

        match fired {
            [true, true] => double_clicks += 1,
            [d0, _] => {
                let rx_value = u8::from(!d0);
                let only_dark = !signal;
                events.push(Detection::new(at, rx_basis, rx_value).with_truth(only_dark, eve_knows && !only_dark));
            }
        }

        let resume = at + dead;
        let dead_end = resume.min(len);
        emissions += binomial(dead_end - at - 1, model.p_multi, &mut rng);
        slot = resume;
    }

    Ok(DetectionRecord::from_parts(
        frame.frame_id,
        len,
        events,
        double_clicks,
        emissions,
    ))
}

/// QBER over matched-basis events of a training frame (whose bits are public).
pub fn training_qber(frame: &PulseFrame, record: &DetectionRecord) -> Option<f64> {
    let mut matched = 0usize;
    let mut errors = 0usize;
    for e in &record.events {
        let (b, v) = frame.slot(e.slot as usize);
        if e.rx_basis == b {
            matched += 1;
            if e.rx_value != v {
                errors += 1;
            }
        }
    }
    (matched > 0).then(|| errors as f64 / matched as f64)
}
