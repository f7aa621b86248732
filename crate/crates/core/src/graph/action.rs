use std::collections::BinaryHeap;

use rand::Rng as _;

use super::paths::HeapItem;
use super::{DiGraph, LinkWeights};
use crate::error::{Error, Result};
use crate::util::Rng;

/// Destination-based routing: `(routing node u, destination z) → neighbor v`.
/// Loop-freedom is not required.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingAction {
    pub n: usize,
    /// Row-major `u * n + z`; `None` exactly on the diagonal.
    pub next_hop: Vec<Option<usize>>,
}

impl RoutingAction {
    pub fn new(n: usize) -> Self {
        RoutingAction { n, next_hop: vec![None; n * n] }
    }

    pub fn get(&self, u: usize, z: usize) -> Option<usize> {
        self.next_hop[u * self.n + z]
    }

    pub fn set(&mut self, u: usize, z: usize, v: usize) {
        self.next_hop[u * self.n + z] = Some(v);
    }

    /// Checks completeness and adjacency against `graph`.
    pub fn validate(&self, graph: &DiGraph) -> Result<()> {
        if self.n != graph.n {
            return Err(Error::config(format!("action covers {} nodes, graph has {}", self.n, graph.n)));
        }
        for u in 0..self.n {
            for z in 0..self.n {
                match (u == z, self.get(u, z)) {
                    (true, None) => {}
                    (false, Some(v)) if graph.edge_between(u, v).is_some() => {}
                    (false, Some(v)) => {
                        return Err(Error::config(format!("next hop {v} of node {u} is not adjacent")))
                    }
                    (false, None) => return Err(Error::config(format!("missing entry ({u}, {z})"))),
                    (true, Some(_)) => return Err(Error::config(format!("entry on diagonal at {u}"))),
                }
            }
        }
        Ok(())
    }

    /// Follows next hops from `u` toward `z`; `None` if a loop or dead end
    /// is hit before reaching `z`.
    pub fn route(&self, u: usize, z: usize) -> Option<Vec<usize>> {
        let mut path = vec![u];
        let mut cur = u;
        while cur != z {
            cur = self.get(cur, z)?;
            if path.len() > self.n {
                return None;
            }
            path.push(cur);
        }
        Some(path)
    }

    /// True if every per-destination next-hop graph is a tree rooted at the
    /// destination.
    pub fn is_loop_free(&self) -> bool {
        (0..self.n).all(|z| (0..self.n).all(|u| self.route(u, z).is_some()))
    }
}

/// Splits tie-broken shortest paths into per-node next hops by running a
/// destination-rooted Dijkstra for every destination. Among equal-cost
/// candidates the smallest neighbor id wins.
pub fn weights_to_action(graph: &DiGraph, weights: &LinkWeights) -> RoutingAction {
    let n = graph.n;
    let inc = graph.in_edges();
    let mut action = RoutingAction::new(n);
    let mut dist = vec![f64::INFINITY; n];
    let mut next: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    for z in 0..n {
        dist.fill(f64::INFINITY);
        next.fill(None);
        done.fill(false);
        dist[z] = 0.0;
        heap.push(HeapItem { dist: 0.0, node: z });
        while let Some(HeapItem { dist: d, node: x }) = heap.pop() {
            if done[x] || d > dist[x] {
                continue;
            }
            done[x] = true;
            for &ei in &inc[x] {
                let y = graph.edges[ei].src;
                if done[y] {
                    continue;
                }
                let nd = d + weights.0[ei];
                if nd < dist[y] || (nd == dist[y] && next[y].is_some_and(|v| x < v)) {
                    dist[y] = nd;
                    next[y] = Some(x);
                    heap.push(HeapItem { dist: nd, node: y });
                }
            }
        }
        for u in 0..n {
            if u != z {
                action.next_hop[u * n + z] = next[u];
            }
        }
    }
    action
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandomMode {
    /// Uniform next hop per (node, destination); loops allowed.
    NextHop,
    /// Shortest paths under i.i.d. uniform (0.5, 10] link weights.
    LinkWeight,
}

pub fn random_link_weights(graph: &DiGraph, rng: &mut Rng) -> LinkWeights {
    LinkWeights((0..graph.num_edges()).map(|_| 10.0 - rng.random_range(0.0..9.5)).collect())
}

pub fn random_action(graph: &DiGraph, mode: RandomMode, rng: &mut Rng) -> RoutingAction {
    match mode {
        RandomMode::NextHop => {
            let n = graph.n;
            let mut action = RoutingAction::new(n);
            for u in 0..n {
                let out = &graph.out[u];
                for z in 0..n {
                    if u == z || out.is_empty() {
                        continue;
                    }
                    let ei = out[rng.random_range(0..out.len())];
                    action.set(u, z, graph.edges[ei].dst);
                }
            }
            action
        }
        RandomMode::LinkWeight => weights_to_action(graph, &random_link_weights(graph, rng)),
    }
}

/// Fraction of `(u, z)` decisions whose next hop differs.
pub fn action_fluctuation(prev: &RoutingAction, cur: &RoutingAction) -> Result<f64> {
    if prev.n != cur.n {
        return Err(Error::config(format!(
            "actions cover different node sets ({} vs {})",
            prev.n, cur.n
        )));
    }
    let n = cur.n;
    if n < 2 {
        return Ok(0.0);
    }
    let changed = (0..n)
        .flat_map(|u| (0..n).filter(move |&z| z != u).map(move |z| (u, z)))
        .filter(|&(u, z)| prev.get(u, z) != cur.get(u, z))
        .count();
    Ok(changed as f64 / (n * (n - 1)) as f64)
}
