//! Directed network graphs, shortest paths and routing action types.

mod action;
mod paths;

pub use action::{action_fluctuation, random_action, weights_to_action, random_link_weights, RandomMode, RoutingAction};
pub use paths::{apsp_dijkstra, dijkstra, floyd_warshall, line_digraph, FloydWarshall, LineDigraph, ShortestPathTree};

use crate::error::{Error, Result};
use crate::scenario::Topology;

pub const OSPF_REF_DATARATE: f64 = 1e8;
pub const EIGRP_REF_DATARATE: f64 = 1e7;
pub const EIGRP_REF_DELAY: f64 = 10.0;

pub fn ospf_weight(datarate_bps: f64) -> f64 {
    OSPF_REF_DATARATE / datarate_bps
}

/// Classic EIGRP composite metric with default K-values; delay in ms.
pub fn eigrp_weight(datarate_bps: f64, delay_ms: f64) -> f64 {
    256.0 * (EIGRP_REF_DATARATE / datarate_bps + delay_ms / EIGRP_REF_DELAY)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirEdge {
    pub src: usize,
    pub dst: usize,
    /// Index of the undirected link in the topology.
    pub link: usize,
    /// `2 * link + direction`; stable across link failures.
    pub id: usize,
    pub datarate_bps: f64,
    pub delay_ms: f64,
    pub buffer_bytes: u64,
}

/// Full-duplex network as a directed graph over the surviving links. Each
/// link contributes `(u→v)` followed by `(v→u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiGraph {
    pub n: usize,
    pub edges: Vec<DirEdge>,
    /// Outgoing edge indices per node, sorted by destination id.
    pub out: Vec<Vec<usize>>,
}

impl DiGraph {
    pub fn from_topology(topology: &Topology) -> Self {
        Self::with_alive(topology, &vec![true; topology.links.len()])
    }

    pub fn with_alive(topology: &Topology, alive: &[bool]) -> Self {
        let mut edges = Vec::with_capacity(2 * topology.links.len());
        for (idx, l) in topology.links.iter().enumerate() {
            if !alive[idx] {
                continue;
            }
            for (dir, (src, dst)) in [(l.u, l.v), (l.v, l.u)].into_iter().enumerate() {
                edges.push(DirEdge {
                    src,
                    dst,
                    link: idx,
                    id: 2 * idx + dir,
                    datarate_bps: l.datarate_bps,
                    delay_ms: l.delay_ms,
                    buffer_bytes: l.buffer_bytes,
                });
            }
        }
        Self::from_edges(topology.num_nodes(), edges)
    }

    /// Builds a graph from raw directed pairs with unit attributes.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Self {
        let edges = pairs
            .iter()
            .enumerate()
            .map(|(i, &(src, dst))| DirEdge {
                src,
                dst,
                link: i,
                id: i,
                datarate_bps: 1e8,
                delay_ms: 1.0,
                buffer_bytes: 25_000,
            })
            .collect();
        Self::from_edges(n, edges)
    }

    pub fn from_edges(n: usize, edges: Vec<DirEdge>) -> Self {
        let mut out = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            out[e.src].push(i);
        }
        for list in &mut out {
            list.sort_by_key(|&i| (edges[i].dst, i));
        }
        DiGraph { n, edges, out }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge index of `src → dst`, if present.
    pub fn edge_between(&self, src: usize, dst: usize) -> Option<usize> {
        self.out[src].iter().copied().find(|&i| self.edges[i].dst == dst)
    }

    pub fn in_edges(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.n];
        for (i, e) in self.edges.iter().enumerate() {
            inc[e.dst].push(i);
        }
        inc
    }

    pub fn ospf_weights(&self) -> LinkWeights {
        LinkWeights(self.edges.iter().map(|e| ospf_weight(e.datarate_bps)).collect())
    }

    pub fn eigrp_weights(&self) -> LinkWeights {
        LinkWeights(self.edges.iter().map(|e| eigrp_weight(e.datarate_bps, e.delay_ms)).collect())
    }
}

/// One positive weight per directed edge of a [`DiGraph`].
#[derive(Clone, Debug, PartialEq)]
pub struct LinkWeights(pub Vec<f64>);

impl LinkWeights {
    pub fn validate(&self, graph: &DiGraph) -> Result<()> {
        if self.0.len() != graph.num_edges() {
            return Err(Error::config(format!(
                "expected {} link weights, got {}",
                graph.num_edges(),
                self.0.len()
            )));
        }
        if let Some(w) = self.0.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Numerical(format!("link weight {w} is not strictly positive and finite")));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> LinkWeights {
        LinkWeights(self.0.iter().map(|w| w * factor).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ospf_reference_values() {
        assert_relative_eq!(ospf_weight(1e8), 1.0);
        assert_relative_eq!(ospf_weight(5e7), 2.0);
        assert_relative_eq!(ospf_weight(2e8), 0.5);
    }

    #[test]
    fn eigrp_reference_values() {
        assert_relative_eq!(eigrp_weight(1e8, 5.0), 153.6, epsilon = 1e-9);
        assert_relative_eq!(eigrp_weight(5e7, 1.0), 76.8, epsilon = 1e-9);
        assert_relative_eq!(eigrp_weight(1e7, 0.0), 256.0, epsilon = 1e-9);
    }

    #[test]
    fn link_weight_validation() {
        let g = DiGraph::from_pairs(2, &[(0, 1), (1, 0)]);
        assert!(LinkWeights(vec![1.0, 2.0]).validate(&g).is_ok());
        assert!(LinkWeights(vec![1.0, 0.0]).validate(&g).is_err());
        assert!(LinkWeights(vec![1.0, f64::NAN]).validate(&g).is_err());
        assert!(LinkWeights(vec![1.0]).validate(&g).is_err());
    }
}
