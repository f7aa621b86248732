use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{orthogonal, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::util::Rng;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const INIT_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), orthogonal(input, output, INIT_GAIN, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, output));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    pub fn weight_id(&self) -> usize {
        self.w
    }

    pub fn bias_id(&self) -> usize {
        self.b
    }
}

/// Two dense layers with a LeakyReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(tape, store, x);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.l2.forward(tape, store, h)
    }

    pub fn first(&self) -> &Linear {
        &self.l1
    }

    pub fn last(&self) -> &Linear {
        &self.l2
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, dim));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.layer_norm(x);
        let y = tape.mul_row(y, g);
        tape.add_row(y, b)
    }
}

/// Directed graph with node and edge feature rows. Disjoint unions of
/// several graphs are themselves valid batches.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub node_x: Tensor,
    pub edge_x: Tensor,
}

impl GraphBatch {
    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.src.len() != self.dst.len() {
            return Err(Error::config("edge endpoint lists differ in length"));
        }
        if self.node_x.rows != self.num_nodes || self.edge_x.rows != self.src.len() {
            return Err(Error::config(format!(
                "feature rows ({}, {}) do not match entity counts ({}, {})",
                self.node_x.rows,
                self.edge_x.rows,
                self.num_nodes,
                self.src.len()
            )));
        }
        if self.src.iter().chain(&self.dst).any(|&v| v >= self.num_nodes) {
            return Err(Error::config("edge endpoint out of range"));
        }
        Ok(())
    }

    /// Disjoint union; returns the batch plus node and edge offsets per part.
    pub fn union(parts: &[&GraphBatch]) -> (GraphBatch, Vec<usize>, Vec<usize>) {
        let mut node_off = Vec::with_capacity(parts.len());
        let mut edge_off = Vec::with_capacity(parts.len());
        let (mut n, mut src, mut dst) = (0, Vec::new(), Vec::new());
        for p in parts {
            node_off.push(n);
            edge_off.push(src.len());
            src.extend(p.src.iter().map(|v| v + n));
            dst.extend(p.dst.iter().map(|v| v + n));
            n += p.num_nodes;
        }
        let node_x = Tensor::vcat(&parts.iter().map(|p| &p.node_x).collect::<Vec<_>>());
        let edge_x = Tensor::vcat(&parts.iter().map(|p| &p.edge_x).collect::<Vec<_>>());
        (GraphBatch { num_nodes: n, src, dst, node_x, edge_x }, node_off, edge_off)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpnConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Edge update sees only the source node instead of both endpoints.
    pub source_only: bool,
}

impl Default for MpnConfig {
    fn default() -> Self {
        MpnConfig { hidden: 12, layers: 2, source_only: false }
    }
}

#[derive(Clone, Debug)]
struct MpnLayer {
    edge_fn: Mlp,
    node_fn: Mlp,
    edge_norm: LayerNorm,
    node_norm: LayerNorm,
}

/// Encode-process message passing network. Each layer updates edges from
/// their endpoints, then nodes from the mean and minimum over incoming
/// edges; both updates go through layer norm and a residual connection.
#[derive(Clone, Debug)]
pub struct Mpn {
    config: MpnConfig,
    node_enc: Mlp,
    edge_enc: Mlp,
    layers: Vec<MpnLayer>,
}

#[derive(Clone, Copy, Debug)]
pub struct MpnOutput {
    pub nodes: Var,
    pub edges: Var,
}

impl Mpn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        node_in: usize,
        edge_in: usize,
        config: MpnConfig,
        rng: &mut Rng,
    ) -> Self {
        let h = config.hidden;
        let node_enc = Mlp::new(store, &format!("{name}.node_enc"), node_in, h, h, rng);
        let edge_enc = Mlp::new(store, &format!("{name}.edge_enc"), edge_in, h, h, rng);
        let edge_fn_in = if config.source_only { 2 * h } else { 3 * h };
        let layers = (0..config.layers)
            .map(|l| MpnLayer {
                edge_fn: Mlp::new(store, &format!("{name}.layer{l}.edge"), edge_fn_in, h, h, rng),
                node_fn: Mlp::new(store, &format!("{name}.layer{l}.node"), 3 * h, h, h, rng),
                edge_norm: LayerNorm::new(store, &format!("{name}.layer{l}.edge_ln"), h),
                node_norm: LayerNorm::new(store, &format!("{name}.layer{l}.node_ln"), h),
            })
            .collect();
        Mpn { config, node_enc, edge_enc, layers }
    }

    pub fn config(&self) -> MpnConfig {
        self.config
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch) -> MpnOutput {
        let src = Arc::new(batch.src.clone());
        let dst = Arc::new(batch.dst.clone());
        let nx = tape.constant(batch.node_x.clone());
        let ex = tape.constant(batch.edge_x.clone());
        let mut nodes = self.node_enc.forward(tape, store, nx);
        let mut edges = self.edge_enc.forward(tape, store, ex);
        for layer in &self.layers {
            let xs = tape.gather(nodes, src.clone());
            let input = if self.config.source_only {
                tape.concat(&[xs, edges])
            } else {
                let xd = tape.gather(nodes, dst.clone());
                tape.concat(&[xs, xd, edges])
            };
            let upd = layer.edge_fn.forward(tape, store, input);
            let upd = layer.edge_norm.forward(tape, store, upd);
            edges = tape.add(edges, upd);

            let mean = tape.segment_mean(edges, dst.clone(), batch.num_nodes);
            let min = tape.segment_min(edges, &dst, batch.num_nodes);
            let input = tape.concat(&[nodes, mean, min]);
            let upd = layer.node_fn.forward(tape, store, input);
            let upd = layer.node_norm.forward(tape, store, upd);
            nodes = tape.add(nodes, upd);
        }
        MpnOutput { nodes, edges }
    }
}
