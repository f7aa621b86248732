use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{DiGraph, LinkWeights};

/// Heap entry ordered as a min-heap on `(dist, node)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct HeapItem {
    pub dist: f64,
    pub node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortestPathTree {
    pub source: usize,
    pub dist: Vec<f64>,
    /// Predecessor node on the tie-broken shortest path.
    pub pred: Vec<Option<usize>>,
}

impl ShortestPathTree {
    pub fn path_to(&self, target: usize) -> Option<Vec<usize>> {
        if !self.dist[target].is_finite() {
            return None;
        }
        let mut path = vec![target];
        let mut cur = target;
        while let Some(p) = self.pred[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Some(path)
    }
}

/// Single-source shortest paths. Among equal-cost predecessors the one with
/// the smallest id wins. Unreachable nodes keep an infinite distance.
pub fn dijkstra(graph: &DiGraph, weights: &LinkWeights, source: usize) -> ShortestPathTree {
    let n = graph.n;
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapItem { dist: 0.0, node: source });
    while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
        if done[u] || d > dist[u] {
            continue;
        }
        done[u] = true;
        for &ei in &graph.out[u] {
            let v = graph.edges[ei].dst;
            if done[v] {
                continue;
            }
            let nd = d + weights.0[ei];
            let better = nd < dist[v] || (nd == dist[v] && pred[v].is_some_and(|p| u < p));
            if better {
                dist[v] = nd;
                pred[v] = Some(u);
                heap.push(HeapItem { dist: nd, node: v });
            }
        }
    }
    ShortestPathTree { source, dist, pred }
}

/// All-pairs distances by running Dijkstra from every node; row `i` holds
/// distances from `i`.
pub fn apsp_dijkstra(graph: &DiGraph, weights: &LinkWeights) -> Vec<Vec<f64>> {
    (0..graph.n).map(|s| dijkstra(graph, weights, s).dist).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloydWarshall {
    pub dist: Vec<Vec<f64>>,
    /// First hop on the tie-broken shortest `i → j` path.
    pub next: Vec<Vec<Option<usize>>>,
}

/// Floyd-Warshall all-pairs shortest paths. Next hops follow the same rule
/// as the destination-rooted trees: the smallest-id neighbor `v` of `i` with
/// `w(i,v) + d(v,j) = d(i,j)`.
pub fn floyd_warshall(graph: &DiGraph, weights: &LinkWeights) -> FloydWarshall {
    let n = graph.n;
    let mut dist = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for (ei, e) in graph.edges.iter().enumerate() {
        let w = weights.0[ei];
        if w < dist[e.src][e.dst] {
            dist[e.src][e.dst] = w;
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = dist[i][k];
            if !dik.is_finite() {
                continue;
            }
            for j in 0..n {
                let cand = dik + dist[k][j];
                if cand < dist[i][j] {
                    dist[i][j] = cand;
                }
            }
        }
    }
    let mut next = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j || !dist[i][j].is_finite() {
                continue;
            }
            let target = dist[i][j];
            let tol = 1e-12 * target.abs().max(1.0);
            next[i][j] = graph.out[i]
                .iter()
                .map(|&ei| (graph.edges[ei].dst, weights.0[ei]))
                .filter(|&(v, w)| w + dist[v][j] <= target + tol)
                .map(|(v, _)| v)
                .min();
        }
    }
    FloydWarshall { dist, next }
}

/// Line digraph: one node per directed edge, an arc for every pair of edges
/// forming a directed path of length two (2-cycles included).
#[derive(Clone, Debug, PartialEq)]
pub struct LineDigraph {
    pub num_nodes: usize,
    pub arcs: Vec<(usize, usize)>,
}

pub fn line_digraph(graph: &DiGraph) -> LineDigraph {
    let mut arcs = Vec::new();
    for (a, e) in graph.edges.iter().enumerate() {
        for &b in &graph.out[e.dst] {
            arcs.push((a, b));
        }
    }
    LineDigraph { num_nodes: graph.num_edges(), arcs }
}
