use std::sync::Arc;

use rand::Rng as _;

use super::{stack, tensor_rows, ActionChoice, ActionSample, AgentConfig, Mode, Observation};
use crate::error::{Error, Result};
use crate::graph::{DiGraph, RoutingAction};
use crate::nn::{GraphBatch, Mlp, Mpn, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE};
use crate::policy::observe::{FrameHistory, Normalizer, FRAMES};
use crate::sim::{D_EDGE, D_GLOBAL, D_NODE};
use crate::util::Rng;

/// Destination/edge combinations of one graph, grouped into decision
/// segments: one segment per (node v, destination z ≠ v) holding the pairs
/// of v's outgoing edges.
#[derive(Clone, Debug, PartialEq)]
pub struct PairIndex {
    pub n: usize,
    pub edge: Vec<usize>,
    pub dest: Vec<usize>,
    pub seg: Vec<usize>,
    /// `(v, z)` per segment.
    pub segments: Vec<(usize, usize)>,
    /// Pair range of each segment (`segments.len() + 1` entries).
    pub seg_start: Vec<usize>,
    /// `[d(v,z), d(u,z)]` per pair, scaled by the largest finite distance.
    pub dist: Tensor,
    /// Scaled distance matrix, row-major `n×n`.
    pub dist_matrix: Vec<f64>,
}

impl PairIndex {
    pub fn build(graph: &DiGraph, dist: &[Vec<f64>]) -> Result<Self> {
        let n = graph.n;
        let maxd = dist.iter().flatten().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
        let scale = if maxd > 0.0 { maxd } else { 1.0 };
        let norm = |d: f64| if d.is_finite() { d / scale } else { 1.0 };
        let mut p = PairIndex {
            n,
            edge: Vec::new(),
            dest: Vec::new(),
            seg: Vec::new(),
            segments: Vec::new(),
            seg_start: vec![0],
            dist: Tensor::zeros(0, 2),
            dist_matrix: (0..n * n).map(|k| norm(dist[k / n][k % n])).collect(),
        };
        let mut dist_data = Vec::new();
        for v in 0..n {
            if graph.out[v].is_empty() && n > 1 {
                return Err(Error::Runtime(format!("node {v} has no surviving outgoing edge")));
            }
            for z in 0..n {
                if z == v {
                    continue;
                }
                let s = p.segments.len();
                for &e in &graph.out[v] {
                    let u = graph.edges[e].dst;
                    p.edge.push(e);
                    p.dest.push(z);
                    p.seg.push(s);
                    dist_data.push(norm(dist[v][z]));
                    dist_data.push(norm(dist[u][z]));
                }
                p.segments.push((v, z));
                p.seg_start.push(p.edge.len());
            }
        }
        p.dist = Tensor::from_vec(p.edge.len(), 2, dist_data);
        Ok(p)
    }

    pub fn num_pairs(&self) -> usize {
        self.edge.len()
    }
}

/// Softmax of `ratings / tau`.
pub fn boltzmann_probabilities(ratings: &[f64], tau: f64) -> Vec<f64> {
    let m = ratings.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = ratings.iter().map(|r| ((r - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(super) fn node_input_dim(config: &AgentConfig) -> usize {
    FRAMES * D_GLOBAL + if config.node_features { FRAMES * D_NODE } else { 0 }
}

pub(super) fn edge_input_dim() -> usize {
    FRAMES * (D_EDGE + D_GLOBAL)
}

pub(super) fn observe(
    config: &AgentConfig,
    norm: &Normalizer,
    history: &FrameHistory,
    graph: Arc<DiGraph>,
    dist: &[Vec<f64>],
) -> Result<Observation> {
    let frames = history.padded();
    let n = graph.n;
    let globals = {
        let mut g = Vec::with_capacity(FRAMES * D_GLOBAL);
        stack(&frames, D_GLOBAL, &mut g, |s, out| {
            out.extend(s.global.iter().enumerate().map(|(k, &x)| norm.global.normalize(k, x)));
        });
        g
    };
    let mut node_data = Vec::with_capacity(n * node_input_dim(config));
    for v in 0..n {
        node_data.extend_from_slice(&globals);
        if config.node_features {
            stack(&frames, D_NODE, &mut node_data, |s, out| match &s.nodes {
                Some(rows) => out.extend(rows[v].iter().enumerate().map(|(k, &x)| norm.node.normalize(k, x))),
                None => out.extend([0.0; D_NODE]),
            });
        }
    }
    let mut edge_data = Vec::with_capacity(graph.num_edges() * edge_input_dim());
    for e in &graph.edges {
        stack(&frames, D_EDGE, &mut edge_data, |s, out| {
            out.extend(s.edges[e.id].iter().enumerate().map(|(k, &x)| norm.edge.normalize(k, x)));
        });
        edge_data.extend_from_slice(&globals);
    }
    let batch = GraphBatch {
        num_nodes: n,
        src: graph.edges.iter().map(|e| e.src).collect(),
        dst: graph.edges.iter().map(|e| e.dst).collect(),
        node_x: tensor_rows(n, node_data),
        edge_x: Tensor::from_vec(graph.num_edges(), edge_input_dim(), edge_data),
    };
    let pairs = PairIndex::build(&graph, dist)?;
    Ok(Observation { graph, batch, pairs: Some(Arc::new(pairs)) })
}

#[derive(Clone, Debug)]
pub(super) struct FieldLinesNet {
    actor: Mpn,
    readout: Mlp,
    critic: Mpn,
    critic_head: Mlp,
    pub log_tau: usize,
    hidden: usize,
}

struct Union {
    batch: GraphBatch,
    edge: Arc<Vec<usize>>,
    dest: Arc<Vec<usize>>,
    seg: Arc<Vec<usize>>,
    num_segments: usize,
    dist: Tensor,
    pair_off: Vec<usize>,
    edge_owner: Arc<Vec<usize>>,
}

fn union(obs: &[&Observation]) -> Union {
    let batches: Vec<&GraphBatch> = obs.iter().map(|o| &o.batch).collect();
    let (batch, node_off, edge_off) = GraphBatch::union(&batches);
    let (mut edge, mut dest, mut seg) = (Vec::new(), Vec::new(), Vec::new());
    let mut dists = Vec::new();
    let mut pair_off = Vec::with_capacity(obs.len());
    let mut seg_off = 0;
    let mut edge_owner = Vec::with_capacity(batch.num_edges());
    for (b, o) in obs.iter().enumerate() {
        let p = o.pairs.as_ref().expect("next-hop observation carries pairs");
        pair_off.push(edge.len());
        edge.extend(p.edge.iter().map(|e| e + edge_off[b]));
        dest.extend(p.dest.iter().map(|z| z + node_off[b]));
        seg.extend(p.seg.iter().map(|s| s + seg_off));
        seg_off += p.segments.len();
        dists.push(&p.dist);
        edge_owner.extend(std::iter::repeat_n(b, o.batch.num_edges()));
    }
    Union {
        batch,
        edge: Arc::new(edge),
        dest: Arc::new(dest),
        seg: Arc::new(seg),
        num_segments: seg_off,
        dist: Tensor::vcat(&dists),
        pair_off,
        edge_owner: Arc::new(edge_owner),
    }
}

impl FieldLinesNet {
    pub fn new(store: &mut ParamStore, config: &AgentConfig, rng: &mut Rng) -> Self {
        let h = config.mpn.hidden;
        let node_in = node_input_dim(config);
        let edge_in = edge_input_dim();
        let actor = Mpn::new(store, "actor.mpn", node_in, edge_in, config.mpn, rng);
        let readout = Mlp::new(store, "actor.readout", 2 * h + 2, h, 1, rng);
        let critic = Mpn::new(store, "critic.mpn", node_in, edge_in, config.mpn, rng);
        let critic_head = Mlp::new(store, "critic.readout", h, h, 1, rng);
        let log_tau = store.add("log_tau", Tensor::scalar(config.init_tau.ln()));
        FieldLinesNet { actor, readout, critic, critic_head, log_tau, hidden: h }
    }

    pub fn actor_head_ids(&self) -> Vec<usize> {
        vec![self.readout.last().weight_id(), self.readout.last().bias_id()]
    }

    pub fn critic_head_ids(&self) -> Vec<usize> {
        vec![self.critic_head.last().weight_id(), self.critic_head.last().bias_id()]
    }

    /// Ratings φ for every pair of the union, as a column. The first readout
    /// layer on `[x_e, x_z, d]` is split into per-edge and per-destination
    /// projections so the pair count only multiplies cheap row additions.
    fn ratings(&self, tape: &mut Tape, store: &ParamStore, u: &Union) -> Var {
        let out = self.actor.forward(tape, store, &u.batch);
        let h = self.hidden;
        let l1 = self.readout.first();
        let w = tape.param(store, l1.weight_id());
        let b = tape.param(store, l1.bias_id());
        let we = tape.slice_rows(w, 0, h);
        let wz = tape.slice_rows(w, h, h);
        let wd = tape.slice_rows(w, 2 * h, 2);
        let pe = tape.matmul(out.edges, we);
        let pz = tape.matmul(out.nodes, wz);
        let pe = tape.gather(pe, u.edge.clone());
        let pz = tape.gather(pz, u.dest.clone());
        let d = tape.constant(u.dist.clone());
        let pd = tape.matmul(d, wd);
        let s = tape.add(pe, pz);
        let s = tape.add(s, pd);
        let s = tape.add_row(s, b);
        let s = tape.leaky_relu(s, LEAKY_SLOPE);
        self.readout.last().forward(tape, store, s)
    }

    fn log_probs(&self, tape: &mut Tape, store: &ParamStore, u: &Union) -> Var {
        let phi = self.ratings(tape, store, u);
        let log_tau = tape.param(store, self.log_tau);
        let neg = tape.scale(log_tau, -1.0);
        let inv_tau = tape.exp(neg);
        let logits = tape.mul_scalar(phi, inv_tau);
        tape.segment_log_softmax(logits, u.seg.clone(), u.num_segments)
    }

    pub fn evaluate_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: &[&Observation],
        choices: Option<&[&ActionChoice]>,
    ) -> (Option<Var>, Var) {
        let u = union(obs);
        let logp = choices.map(|choices| {
            let lsm = self.log_probs(tape, store, &u);
            let mut idx = Vec::new();
            let mut owner = Vec::new();
            for (b, c) in choices.iter().enumerate() {
                let ActionChoice::NextHop(chosen) = c else {
                    panic!("next-hop policy given a link-weight choice");
                };
                idx.extend(chosen.iter().map(|k| k + u.pair_off[b]));
                owner.extend(std::iter::repeat_n(b, chosen.len()));
            }
            let picked = tape.gather(lsm, Arc::new(idx));
            tape.segment_sum(picked, Arc::new(owner), obs.len())
        });
        let out = self.critic.forward(tape, store, &u.batch);
        let v = self.critic_head.forward(tape, store, out.edges);
        let value = tape.segment_mean(v, u.edge_owner.clone(), obs.len());
        (logp, value)
    }

    /// Full `|V|×|E|` rating matrix of one observation.
    pub fn rating_matrix(&self, store: &ParamStore, obs: &Observation) -> Tensor {
        let pairs = obs.pairs.as_ref().expect("next-hop observation carries pairs");
        let (n, m) = (obs.graph.n, obs.graph.num_edges());
        let mut edge = Vec::with_capacity(n * m);
        let mut dest = Vec::with_capacity(n * m);
        let mut dist = Vec::with_capacity(2 * n * m);
        for z in 0..n {
            for (e, de) in obs.graph.edges.iter().enumerate() {
                edge.push(e);
                dest.push(z);
                dist.push(pairs.dist_matrix[de.src * n + z]);
                dist.push(pairs.dist_matrix[de.dst * n + z]);
            }
        }
        let u = Union {
            batch: obs.batch.clone(),
            edge: Arc::new(edge),
            dest: Arc::new(dest),
            seg: Arc::new(Vec::new()),
            num_segments: 0,
            dist: Tensor::from_vec(n * m, 2, dist),
            pair_off: vec![0],
            edge_owner: Arc::new(Vec::new()),
        };
        let mut tape = Tape::new();
        let phi = self.ratings(&mut tape, store, &u);
        Tensor::from_vec(n, m, tape.value(phi).data.clone())
    }

    fn single_log_probs(&self, store: &ParamStore, obs: &Observation) -> Vec<f64> {
        let mut tape = Tape::new();
        let u = union(&[obs]);
        let lsm = self.log_probs(&mut tape, store, &u);
        tape.value(lsm).data.clone()
    }

    pub fn act(&self, store: &ParamStore, obs: &Observation, mode: Mode, rng: &mut Rng) -> Result<ActionSample> {
        let pairs = obs.pairs.as_ref().ok_or_else(|| Error::StaleInput("missing distance features".into()))?;
        let lp = self.single_log_probs(store, obs);
        if lp.iter().any(|x| x.is_nan()) {
            return Err(Error::Numerical("non-finite next-hop probabilities".into()));
        }
        let mut chosen = Vec::with_capacity(pairs.segments.len());
        let mut log_prob = 0.0;
        let mut entropy = 0.0;
        let mut action = RoutingAction::new(pairs.n);
        for (s, &(v, z)) in pairs.segments.iter().enumerate() {
            let range = pairs.seg_start[s]..pairs.seg_start[s + 1];
            let k = match mode {
                Mode::Greedy => {
                    let mut best = range.start;
                    for k in range.clone() {
                        if lp[k] > lp[best] {
                            best = k;
                        }
                    }
                    best
                }
                Mode::Explore => {
                    let r: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = range.end - 1;
                    for k in range.clone() {
                        acc += lp[k].exp();
                        if r < acc {
                            pick = k;
                            break;
                        }
                    }
                    pick
                }
            };
            entropy -= range.map(|k| lp[k].exp() * lp[k]).filter(|x| x.is_finite()).sum::<f64>();
            log_prob += lp[k];
            chosen.push(k);
            action.set(v, z, obs.graph.edges[pairs.edge[k]].dst);
        }
        let decisions = pairs.segments.len().max(1) as f64;
        Ok(ActionSample {
            action,
            choice: ActionChoice::NextHop(chosen),
            log_prob,
            entropy: entropy / decisions,
            weights: None,
        })
    }

    pub fn choice_for(&self, store: &ParamStore, obs: &Observation, action: &RoutingAction) -> Result<(ActionChoice, f64)> {
        let pairs = obs.pairs.as_ref().ok_or_else(|| Error::StaleInput("missing distance features".into()))?;
        let lp = self.single_log_probs(store, obs);
        let mut chosen = Vec::with_capacity(pairs.segments.len());
        let mut log_prob = 0.0;
        for (s, &(v, z)) in pairs.segments.iter().enumerate() {
            let nh = action.get(v, z).ok_or_else(|| Error::config(format!("action has no entry for ({v}, {z})")))?;
            let k = (pairs.seg_start[s]..pairs.seg_start[s + 1])
                .find(|&k| obs.graph.edges[pairs.edge[k]].dst == nh)
                .ok_or_else(|| Error::config(format!("next hop {nh} of ({v}, {z}) is not adjacent")))?;
            log_prob += lp[k];
            chosen.push(k);
        }
        Ok((ActionChoice::NextHop(chosen), log_prob))
    }
}
