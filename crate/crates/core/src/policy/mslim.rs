use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use super::{ActionChoice, ActionSample, AgentConfig, Mode, Observation};
use crate::error::{Error, Result};
use crate::graph::{line_digraph, weights_to_action, DiGraph, LinkWeights};
use crate::nn::{softplus, GraphBatch, Mlp, Mpn, ParamStore, Tape, Tensor, Var};
use crate::policy::observe::{FrameHistory, Normalizer, FRAMES};
use crate::sim::feat;
use crate::util::Rng;

pub(super) const LINE_FEATURES: usize = 2;

/// Line-digraph input: per directed edge, (LU, previous weight) over the
/// stacked frames; arcs carry no features.
pub(super) fn observe(
    norm: &Normalizer,
    history: &FrameHistory,
    weight_frames: &VecDeque<Vec<f64>>,
    graph: Arc<DiGraph>,
) -> Observation {
    let frames = history.padded();
    let pad = FRAMES - weight_frames.len().min(FRAMES);
    let m = graph.num_edges();
    let mut data = Vec::with_capacity(m * FRAMES * LINE_FEATURES);
    for e in &graph.edges {
        for (f, frame) in frames.iter().enumerate() {
            match frame {
                Some(s) if f >= pad => {
                    let w = weight_frames[f - pad][e.id];
                    data.push(norm.line.normalize(0, s.edges[e.id][feat::E_LU]));
                    data.push(norm.line.normalize(1, w));
                }
                _ => data.extend([0.0; LINE_FEATURES]),
            }
        }
    }
    let ld = line_digraph(&graph);
    let batch = GraphBatch {
        num_nodes: m,
        src: ld.arcs.iter().map(|a| a.0).collect(),
        dst: ld.arcs.iter().map(|a| a.1).collect(),
        node_x: Tensor::from_vec(m, FRAMES * LINE_FEATURES, data),
        edge_x: Tensor::zeros(ld.arcs.len(), 0),
    };
    Observation { graph, batch, pairs: None }
}

#[derive(Clone, Debug)]
pub(super) struct MSlimNet {
    actor: Mpn,
    readout: Mlp,
    critic: Mpn,
    critic_head: Mlp,
    pub log_sigma: usize,
}

impl MSlimNet {
    pub fn new(store: &mut ParamStore, config: &AgentConfig, rng: &mut Rng) -> Self {
        let h = config.mpn.hidden;
        let node_in = FRAMES * LINE_FEATURES;
        let actor = Mpn::new(store, "actor.mpn", node_in, 0, config.mpn, rng);
        let readout = Mlp::new(store, "actor.readout", h, h, 1, rng);
        let critic = Mpn::new(store, "critic.mpn", node_in, 0, config.mpn, rng);
        let critic_head = Mlp::new(store, "critic.readout", h, h, 1, rng);
        let log_sigma = store.add("log_sigma", Tensor::scalar(config.init_sigma.ln()));
        MSlimNet { actor, readout, critic, critic_head, log_sigma }
    }

    pub fn actor_head_ids(&self) -> Vec<usize> {
        vec![self.readout.last().weight_id(), self.readout.last().bias_id()]
    }

    pub fn critic_head_ids(&self) -> Vec<usize> {
        vec![self.critic_head.last().weight_id(), self.critic_head.last().bias_id()]
    }

    fn means(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch) -> Var {
        let out = self.actor.forward(tape, store, batch);
        self.readout.forward(tape, store, out.nodes)
    }

    pub fn evaluate_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: &[&Observation],
        choices: Option<&[&ActionChoice]>,
    ) -> (Option<Var>, Var) {
        let batches: Vec<&GraphBatch> = obs.iter().map(|o| &o.batch).collect();
        let (batch, _, _) = GraphBatch::union(&batches);
        let owner: Arc<Vec<usize>> =
            Arc::new(obs.iter().enumerate().flat_map(|(b, o)| std::iter::repeat_n(b, o.batch.num_nodes)).collect());
        let logp = choices.map(|choices| {
            let o = self.means(tape, store, &batch);
            let mut xs = Vec::with_capacity(batch.num_nodes);
            for c in choices {
                let ActionChoice::Weights(x) = c else {
                    panic!("link-weight policy given a next-hop choice");
                };
                xs.extend_from_slice(x);
            }
            let x = tape.constant(Tensor::column(xs));
            let diff = tape.sub(x, o);
            let sq = tape.square(diff);
            let log_sigma = tape.param(store, self.log_sigma);
            let m2 = tape.scale(log_sigma, -2.0);
            let inv_var = tape.exp(m2);
            let quad = tape.mul_scalar(sq, inv_var);
            let quad = tape.scale(quad, -0.5);
            let ls = tape.repeat_row(log_sigma, batch.num_nodes);
            let term = tape.sub(quad, ls);
            let term = tape.add_const(term, -0.5 * (2.0 * PI).ln());
            tape.segment_sum(term, owner.clone(), obs.len())
        });
        let out = self.critic.forward(tape, store, &batch);
        let v = self.critic_head.forward(tape, store, out.nodes);
        let value = tape.segment_mean(v, owner, obs.len());
        (logp, value)
    }

    pub fn act(&self, store: &ParamStore, obs: &Observation, mode: Mode, rng: &mut Rng) -> Result<ActionSample> {
        let mut tape = Tape::new();
        let o_var = self.means(&mut tape, store, &obs.batch);
        let o = tape.value(o_var).data.clone();
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite link-weight means".into()));
        }
        let sigma = store.tensor(self.log_sigma).item().exp();
        let x: Vec<f64> = match mode {
            Mode::Greedy => o.clone(),
            Mode::Explore => o
                .iter()
                .map(|m| {
                    let eps: f64 = StandardNormal.sample(rng);
                    m + sigma * eps
                })
                .collect(),
        };
        let log_prob = x
            .iter()
            .zip(&o)
            .map(|(xi, oi)| -0.5 * ((xi - oi) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * PI).ln())
            .sum();
        let weights = LinkWeights(x.iter().map(|&v| softplus(v).max(f64::MIN_POSITIVE)).collect());
        let action = weights_to_action(&obs.graph, &weights);
        Ok(ActionSample {
            action,
            choice: ActionChoice::Weights(x),
            log_prob,
            entropy: 0.5 * (2.0 * PI * std::f64::consts::E * sigma * sigma).ln(),
            weights: Some(weights),
        })
    }
}
