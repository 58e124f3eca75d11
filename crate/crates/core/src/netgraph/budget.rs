use super::{ConfigError, Route, Topology};
use crate::ids::{LinkId, NodeId, SwitchId};

/// Something whose optical loss can be totalled.
#[derive(Debug, Clone, PartialEq)]
pub enum BudgetPath {
    Link(LinkId),
    /// Through a switch from a tx port to an rx port, whether or not a link
    /// is configured for that pairing.
    Switched {
        switch: SwitchId,
        tx: NodeId,
        rx: NodeId,
    },
    /// Concatenated segments.
    Chain(Vec<BudgetPath>),
}

/// Fiber loss (length times the per-km coefficient unless overridden) plus
/// switch insertion loss.
pub fn link_budget(topo: &Topology, path: &BudgetPath) -> Result<f64, ConfigError> {
    match path {
        BudgetPath::Link(id) => {
            let l = topo.link(id).ok_or_else(|| ConfigError::NoPath(format!("link `{id}`")))?;
            match &l.route {
                Route::Direct { length_km, loss_db } => Ok(loss_db.unwrap_or(length_km * topo.fiber_loss_db_per_km)),
                Route::Switched { switch } => link_budget(
                    topo,
                    &BudgetPath::Switched {
                        switch: switch.clone(),
                        tx: l.tx.clone(),
                        rx: l.rx.clone(),
                    },
                ),
            }
        }
        BudgetPath::Switched { switch, tx, rx } => {
            let s = topo
                .switches
                .get(switch)
                .ok_or_else(|| ConfigError::NoPath(format!("switch `{switch}`")))?;
            let port = |n: &NodeId, ports: &[super::Port; 2]| {
                ports
                    .iter()
                    .find(|p| &p.node == n)
                    .map(|p| p.loss_db.unwrap_or(p.length_km * topo.fiber_loss_db_per_km))
                    .ok_or_else(|| ConfigError::NoPath(format!("`{n}` on switch `{switch}`")))
            };
            Ok(port(tx, &s.tx_ports)? + port(rx, &s.rx_ports)? + s.insertion_loss_db)
        }
        BudgetPath::Chain(parts) => parts.iter().map(|p| link_budget(topo, p)).sum(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshKind {
    FullMesh,
    Star,
}

/// Point-to-point links needed to connect `n` enclaves.
pub fn required_links(n: u64, kind: MeshKind) -> Result<u64, ConfigError> {
    if n < 2 {
        return Err(ConfigError::Invalid(format!("need at least 2 enclaves, got {n}")));
    }
    Ok(match kind {
        MeshKind::FullMesh => n * (n - 1) / 2,
        MeshKind::Star => n,
    })
}
