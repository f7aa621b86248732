//! Random graph models and the force-directed layout used to derive
//! positional link attributes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng_from_seed, Rng};

/// Topology size class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "nx-XS")]
    XS,
    #[serde(rename = "nx-S")]
    S,
    #[serde(rename = "nx-M")]
    M,
    #[serde(rename = "nx-L")]
    L,
    #[serde(rename = "nx-XL")]
    XL,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::XS, Preset::S, Preset::M, Preset::L, Preset::XL];

    /// Inclusive node-count range.
    pub fn node_range(self) -> (usize, usize) {
        match self {
            Preset::XS => (6, 10),
            Preset::S => (11, 25),
            Preset::M => (26, 50),
            Preset::L => (51, 100),
            Preset::XL => (101, 250),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::XS => "nx-XS",
            Preset::S => "nx-S",
            Preset::M => "nx-M",
            Preset::L => "nx-L",
            Preset::XL => "nx-XL",
        }
    }

    /// Default number of evaluation episodes.
    pub fn default_eval_episodes(self) -> usize {
        match self {
            Preset::L | Preset::XL => 30,
            _ => 100,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_prefix("nx-").unwrap_or(&key);
        match key {
            "xs" => Ok(Preset::XS),
            "s" => Ok(Preset::S),
            "m" => Ok(Preset::M),
            "l" => Ok(Preset::L),
            "xl" => Ok(Preset::XL),
            _ => Err(Error::config(format!("unknown preset `{s}`"))),
        }
    }
}

/// Random graph model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphModel {
    /// Barabási-Albert, attachment count 2.
    BA,
    /// Erdős-Rényi with average degree 3.
    ER,
    /// Watts-Strogatz, 4 neighbors, rewiring probability 0.3.
    WS,
}

/// Largest node count for which the BA model is used.
pub const BA_MAX_NODES: usize = 50;
pub const BA_ATTACHMENT: usize = 2;
pub const ER_MEAN_DEGREE: f64 = 3.0;
pub const WS_NEIGHBORS: usize = 4;
pub const WS_REWIRE_PROB: f64 = 0.3;
pub const MAX_CONNECT_ATTEMPTS: usize = 10_000;
pub const LAYOUT_SEED: u64 = 9001;
pub const LAYOUT_ITERATIONS: usize = 50;

/// Undirected simple graph on nodes `0..n`; edges stored as `(u, v)` with `u < v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimpleGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SimpleGraph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let set: BTreeSet<(usize, usize)> = edges
            .into_iter()
            .filter(|(u, v)| u != v)
            .map(|(u, v)| (u.min(v), u.max(v)))
            .collect();
        SimpleGraph {
            n,
            edges: set.into_iter().collect(),
        }
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        is_connected(self.n, self.edges.iter().copied())
    }
}

/// Breadth-first connectivity test over an undirected edge list.
pub fn is_connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    if n <= 1 {
        return true;
    }
    let mut adj = vec![Vec::new(); n];
    for (u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

/// Draws a node count for the preset and a connected graph from `model`.
pub fn generate_topology(preset: Preset, model: GraphModel, rng: &mut Rng) -> Result<SimpleGraph> {
    let (lo, hi) = preset.node_range();
    if model == GraphModel::BA && hi > BA_MAX_NODES {
        return Err(Error::config(format!(
            "the BA model is limited to {BA_MAX_NODES} nodes, preset {preset} allows up to {hi}"
        )));
    }
    let n = rng.random_range(lo..=hi);
    generate_graph(n, model, rng)
}

/// Picks a model uniformly among those allowed for `n` nodes.
pub fn pick_model(n: usize, rng: &mut Rng) -> GraphModel {
    if n <= BA_MAX_NODES {
        [GraphModel::BA, GraphModel::ER, GraphModel::WS][rng.random_range(0..3)]
    } else {
        [GraphModel::ER, GraphModel::WS][rng.random_range(0..2)]
    }
}

pub fn generate_graph(n: usize, model: GraphModel, rng: &mut Rng) -> Result<SimpleGraph> {
    match model {
        GraphModel::BA => {
            if n > BA_MAX_NODES {
                return Err(Error::config(format!(
                    "the BA model is limited to {BA_MAX_NODES} nodes, got {n}"
                )));
            }
            Ok(barabasi_albert(n, BA_ATTACHMENT, rng))
        }
        GraphModel::ER => {
            let p = if n > 1 { (ER_MEAN_DEGREE / (n - 1) as f64).min(1.0) } else { 0.0 };
            resample_connected(|rng| erdos_renyi(n, p, rng), rng)
        }
        GraphModel::WS => {
            if n <= WS_NEIGHBORS {
                return Err(Error::config(format!(
                    "the WS model needs more than {WS_NEIGHBORS} nodes, got {n}"
                )));
            }
            resample_connected(|rng| watts_strogatz(n, WS_NEIGHBORS, WS_REWIRE_PROB, rng), rng)
        }
    }
}

fn resample_connected(
    mut draw: impl FnMut(&mut Rng) -> SimpleGraph,
    rng: &mut Rng,
) -> Result<SimpleGraph> {
    for _ in 0..MAX_CONNECT_ATTEMPTS {
        let g = draw(rng);
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Runtime(format!(
        "no connected graph after {MAX_CONNECT_ATTEMPTS} attempts"
    )))
}

/// Preferential attachment grown from a single edge between nodes 0 and 1.
/// Every later node attaches to `m` distinct existing nodes chosen with
/// probability proportional to their degree.
pub fn barabasi_albert(n: usize, m: usize, rng: &mut Rng) -> SimpleGraph {
    if n < 2 {
        return SimpleGraph { n, edges: Vec::new() };
    }
    let mut edges = vec![(0, 1)];
    // every node appears once per incident edge
    let mut repeated: Vec<usize> = vec![0, 1];
    for new in 2..n {
        let k = m.min(new);
        let mut targets = BTreeSet::new();
        while targets.len() < k {
            let t = repeated[rng.random_range(0..repeated.len())];
            targets.insert(t);
        }
        for &t in &targets {
            edges.push((t, new));
            repeated.push(t);
            repeated.push(new);
        }
    }
    SimpleGraph::from_edges(n, edges)
}

pub fn erdos_renyi(n: usize, p: f64, rng: &mut Rng) -> SimpleGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    SimpleGraph { n, edges }
}

/// Ring lattice with `k/2` neighbors per side, then each lattice edge
/// `(u, u+j)` is rewired to a uniformly chosen new endpoint with probability `p`.
pub fn watts_strogatz(n: usize, k: usize, p: f64, rng: &mut Rng) -> SimpleGraph {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for u in 0..n {
        for j in 1..=k / 2 {
            let v = (u + j) % n;
            adj[u].insert(v);
            adj[v].insert(u);
        }
    }
    for j in 1..=k / 2 {
        for u in 0..n {
            let v = (u + j) % n;
            if rng.random::<f64>() >= p || !adj[u].contains(&v) {
                continue;
            }
            if adj[u].len() >= n - 1 {
                continue;
            }
            let mut w = rng.random_range(0..n);
            while w == u || adj[u].contains(&w) {
                w = rng.random_range(0..n);
            }
            adj[u].remove(&v);
            adj[v].remove(&u);
            adj[u].insert(w);
            adj[w].insert(u);
        }
    }
    let edges = adj
        .iter()
        .enumerate()
        .flat_map(|(u, nb)| nb.iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
        .collect::<Vec<_>>();
    SimpleGraph::from_edges(n, edges)
}

/// Fruchterman-Reingold spring layout in the unit square, centered on the
/// origin and scaled so the largest absolute coordinate is 1.
pub fn fruchterman_reingold(graph: &SimpleGraph, iterations: usize, seed: u64) -> Vec<[f64; 2]> {
    let n = graph.n;
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![[0.0, 0.0]];
    }
    let mut rng = rng_from_seed(seed);
    let mut pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in &graph.edges {
        adj[u][v] = true;
        adj[v][u] = true;
    }
    let k = (1.0 / n as f64).sqrt();
    let extent = |pos: &[[f64; 2]], d: usize| {
        let (lo, hi) = pos
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[d]), hi.max(p[d])));
        hi - lo
    };
    let mut t = extent(&pos, 0).max(extent(&pos, 1)) * 0.1;
    let dt = t / (iterations as f64 + 1.0);
    for _ in 0..iterations {
        let mut disp = vec![[0.0f64; 2]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = pos[i][0] - pos[j][0];
                let dy = pos[i][1] - pos[j][1];
                let d = (dx * dx + dy * dy).sqrt().max(0.01);
                let a = if adj[i][j] { 1.0 } else { 0.0 };
                let f = k * k / (d * d) - a * d / k;
                disp[i][0] += dx * f;
                disp[i][1] += dy * f;
            }
        }
        let mut moved = 0.0;
        for i in 0..n {
            let len = (disp[i][0].powi(2) + disp[i][1].powi(2)).sqrt().max(0.01);
            let sx = disp[i][0] * t / len;
            let sy = disp[i][1] * t / len;
            pos[i][0] += sx;
            pos[i][1] += sy;
            moved += (sx * sx + sy * sy).sqrt();
        }
        t -= dt;
        if moved / (n as f64) < 1e-4 {
            break;
        }
    }
    let cx = pos.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = pos.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    for p in &mut pos {
        p[0] -= cx;
        p[1] -= cy;
    }
    let lim = pos
        .iter()
        .map(|p| p[0].abs().max(p[1].abs()))
        .fold(0.0f64, f64::max);
    if lim > 0.0 {
        for p in &mut pos {
            p[0] /= lim;
            p[1] /= lim;
        }
    }
    pos
}
