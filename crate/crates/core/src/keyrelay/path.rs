use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{LinkHealthView, RelayError};
use crate::ids::{LinkId, NodeId};
use crate::keystore::{KeyNetwork, Pool};
use crate::netgraph::Topology;

/// An edge usable for relay right now, with the key it could carry.
#[derive(Debug, Clone)]
struct Edge {
    to: NodeId,
    capacity: u64,
}

/// Relay path from `src` to `dst`.
///
/// Only `Up` links outside `exclude` whose key pool holds at least
/// `r_length` bits on both sides qualify, and only trusted nodes may sit in
/// the interior. Among the minimum-hop paths the one whose scarcest hop has
/// the most key wins; remaining ties go to the lexicographically smallest
/// node sequence.
pub fn find_path(
    topo: &Topology,
    keys: &KeyNetwork,
    health: &LinkHealthView,
    src: &NodeId,
    dst: &NodeId,
    r_length: u64,
    exclude: &BTreeSet<LinkId>,
) -> Result<Vec<NodeId>, RelayError> {
    if src == dst {
        return Err(RelayError::SameEndpoints(src.clone()));
    }
    for n in [src, dst] {
        if topo.node(n).is_none() {
            return Err(RelayError::UnknownNode(n.clone()));
        }
    }
    let mut adj: BTreeMap<NodeId, Vec<Edge>> = BTreeMap::new();
    for a in topo.adjacencies() {
        if exclude.contains(&a.id) || !health.is_up(&a.id) {
            continue;
        }
        let capacity = keys
            .available(&a.a, &a.b, Pool::Key)
            .min(keys.available(&a.b, &a.a, Pool::Key));
        if capacity < r_length {
            continue;
        }
        adj.entry(a.a.clone()).or_default().push(Edge {
            to: a.b.clone(),
            capacity,
        });
        adj.entry(a.b.clone()).or_default().push(Edge {
            to: a.a.clone(),
            capacity,
        });
    }
    let passable = |n: &NodeId| n == dst || topo.node(n).is_some_and(|x| x.trusted);

    // hop distance to dst using only edges carrying at least `floor`
    let distances = |floor: u64| {
        let mut dist = BTreeMap::from([(dst.clone(), 0usize)]);
        let mut queue = VecDeque::from([dst.clone()]);
        while let Some(u) = queue.pop_front() {
            if !passable(&u) {
                continue;
            }
            let d = dist[&u];
            for e in adj.get(&u).into_iter().flatten() {
                if e.capacity >= floor && !dist.contains_key(&e.to) {
                    dist.insert(e.to.clone(), d + 1);
                    queue.push_back(e.to.clone());
                }
            }
        }
        dist
    };

    let no_path = || RelayError::NoPath {
        src: src.clone(),
        dst: dst.clone(),
    };
    let hops = *distances(0).get(src).ok_or_else(no_path)?;

    // largest bottleneck that still admits a minimum-hop path
    let mut floors: Vec<u64> = adj.values().flatten().map(|e| e.capacity).collect();
    floors.sort_unstable_by(|a, b| b.cmp(a));
    floors.dedup();
    let (floor, dist) = floors
        .into_iter()
        .map(|f| (f, distances(f)))
        .find(|(_, d)| d.get(src) == Some(&hops))
        .ok_or_else(no_path)?;

    // every remaining candidate has the same length, so stepping to the
    // smallest id each time yields the lexicographically smallest path
    let mut path = vec![src.clone()];
    let mut cur = src.clone();
    while &cur != dst {
        let d = dist[&cur];
        let next = adj[&cur]
            .iter()
            .filter(|e| e.capacity >= floor && dist.get(&e.to) == Some(&(d - 1)) && passable(&e.to))
            .map(|e| e.to.clone())
            .min()
            .ok_or_else(no_path)?;
        path.push(next.clone());
        cur = next;
    }
    Ok(path)
}

/// Link or bridge carrying each hop of `path`.
pub fn hop_links(topo: &Topology, path: &[NodeId]) -> Result<Vec<LinkId>, RelayError> {
    let adj = topo.adjacencies();
    path.windows(2)
        .map(|w| {
            adj.iter()
                .find(|a| (a.a == w[0] && a.b == w[1]) || (a.a == w[1] && a.b == w[0]))
                .map(|a| a.id.clone())
                .ok_or_else(|| RelayError::NotAdjacent(w[0].clone(), w[1].clone()))
        })
        .collect()
}
