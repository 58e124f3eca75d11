use std::collections::{BTreeMap, BTreeSet};

use super::report::{BlockOutcome, MetricsReport};
use crate::ids::NodeId;
use crate::keyrelay::SessionStatus;
use crate::keystore::{audit, AuditRecord, Origin, Pool};
use crate::time::SimTime;

/// What `verify_report` looked at.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerifySummary {
    pub audit_records: usize,
    pub streams: usize,
    pub blocks: usize,
    pub switch_events: usize,
    pub delivered_relays: usize,
}

/// Check every invariant that can be checked from an emitted report:
///
/// * no key bit is consumed twice;
/// * per stream, deposits and FIFO consumption add up;
/// * every write-off covers a real one-time-pad draw;
/// * both ends of each pair see the same deposits and draws (mirrors);
/// * no key block spans a reconfiguration of the switch its link runs through;
/// * every delivered relay session left its key at both endpoints.
///
/// Returns all violations found, not just the first.
pub fn verify_report(report: &MetricsReport) -> Result<VerifySummary, Vec<String>> {
    let mut errors = Vec::new();
    let log = &report.audit;
    if let Err(e) = audit::check_one_time_use(log) {
        errors.push(format!("one-time use: {e}"));
    }
    let streams = match audit::check_conservation(log) {
        Ok(s) => s.len(),
        Err(e) => {
            errors.push(format!("conservation: {e}"));
            0
        }
    };
    if let Err(e) = audit::check_write_offs(log) {
        errors.push(format!("write-offs: {e}"));
    }
    errors.extend(check_mirrors(log));
    errors.extend(check_switch_isolation(report));
    let delivered = check_relays(report, &mut errors);

    if errors.is_empty() {
        Ok(VerifySummary {
            audit_records: log.len(),
            streams,
            blocks: report.blocks.len(),
            switch_events: report.switch_events.len(),
            delivered_relays: delivered,
        })
    } else {
        Err(errors)
    }
}

type Op = (Pool, &'static str, String, u64, u64);

/// Each side of a pair must record the same sequence of deposits and draws.
fn check_mirrors(log: &[AuditRecord]) -> Vec<String> {
    let mut seen: BTreeMap<(NodeId, NodeId), Vec<Op>> = BTreeMap::new();
    for r in log {
        let (node, peer, op) = match r {
            AuditRecord::Deposit {
                node,
                peer,
                pool,
                segment,
                start,
                end,
                ..
            } => (node, peer, (*pool, "deposit", segment.clone(), *start, *end)),
            AuditRecord::Consume {
                node,
                peer,
                pool,
                start,
                end,
                context,
                ..
            } => (node, peer, (*pool, "consume", context.clone(), *start, *end)),
            AuditRecord::WriteOff { .. } => continue,
        };
        seen.entry((node.clone(), peer.clone())).or_default().push(op);
    }
    let mut errors = Vec::new();
    for ((a, b), ops) in &seen {
        if a > b {
            continue;
        }
        let other = seen.get(&(b.clone(), a.clone()));
        if other != Some(ops) {
            errors.push(format!("mirror: {a}->{b} and {b}->{a} key histories differ"));
        }
    }
    for (a, b) in seen.keys() {
        if a > b && !seen.contains_key(&(b.clone(), a.clone())) {
            errors.push(format!("mirror: {a}->{b} has no counterpart"));
        }
    }
    errors
}

/// Blocks on a switched link must fall entirely within one switch setting,
/// and that setting must connect the link's endpoints.
fn check_switch_isolation(report: &MetricsReport) -> Vec<String> {
    let mut errors = Vec::new();
    for b in report.blocks.iter().filter(|b| b.outcome == BlockOutcome::Secret) {
        let Some(sw) = &b.via else { continue };
        let events: Vec<_> = report.switch_events.iter().filter(|e| &e.switch == sw).collect();
        for ev in &events {
            let (at, busy_until) = (ev.at.as_secs(), ev.busy_until.as_secs());
            if ev.at > SimTime::ZERO && b.start_s < busy_until && b.end_s > at {
                errors.push(format!(
                    "block {} on {} ({}..{} s) spans switch {sw} event at {at} s",
                    b.block_id, b.link_id, b.start_s, b.end_s
                ));
            }
        }
        let setting = events.iter().rev().find(|e| e.at.as_secs() <= b.start_s);
        match setting {
            Some(ev) if !ev.pairs.contains(&(b.tx.clone(), b.rx.clone())) => errors.push(format!(
                "block {} on {} generated while switch {sw} did not connect {} to {}",
                b.block_id, b.link_id, b.tx, b.rx
            )),
            None => errors.push(format!(
                "block {} on {}: no recorded setting of switch {sw}",
                b.block_id, b.link_id
            )),
            _ => {}
        }
    }
    errors
}

fn check_relays(report: &MetricsReport, errors: &mut Vec<String>) -> usize {
    let mut relay_deposits: BTreeMap<String, BTreeSet<(NodeId, NodeId, u64)>> = BTreeMap::new();
    for r in &report.audit {
        if let AuditRecord::Deposit {
            node,
            peer,
            pool: Pool::Key,
            segment,
            origin: Origin::Relay,
            start,
            end,
            ..
        } = r
        {
            relay_deposits
                .entry(segment.clone())
                .or_default()
                .insert((node.clone(), peer.clone(), end - start));
        }
    }
    let mut delivered = 0;
    for s in report.relays.iter().filter(|s| s.status == SessionStatus::Delivered) {
        delivered += 1;
        let want = BTreeSet::from([
            (s.src.clone(), s.dst.clone(), s.r_length),
            (s.dst.clone(), s.src.clone(), s.r_length),
        ]);
        if relay_deposits.get(&format!("relay/{}", s.session_id)) != Some(&want) {
            errors.push(format!(
                "relay session {} delivered but its key is not on both endpoints",
                s.session_id
            ));
        }
    }
    delivered
}
