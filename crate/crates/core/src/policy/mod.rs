//! Observation pipeline, the two learned routing policies and the classical
//! baselines.
//!
//! FieldLines rates every (destination, edge) combination and samples one
//! next hop per (node, destination) from a Boltzmann distribution over the
//! node's outgoing edges. M-Slim runs on the line digraph and emits one
//! positive link weight per directed edge; routes follow from shortest paths.

mod baselines;
mod fieldlines;
mod mslim;
mod observe;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use baselines::{Baseline, BaselineKind};
pub use fieldlines::{boltzmann_probabilities, PairIndex};
pub use observe::{FrameHistory, Normalizer, RunningStats, FRAMES, NORM_CLIP};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::graph::{DiGraph, LinkWeights, RoutingAction};
use crate::nn::{GraphBatch, MpnConfig, ParamStore, Tape, Tensor, Var};
use crate::sim::NetworkState;
use crate::util::{rng_from_seed, sha256_hex, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentKind {
    #[serde(rename = "fieldlines")]
    FieldLines,
    #[serde(rename = "mslim")]
    MSlim,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::FieldLines => "fieldlines",
            AgentKind::MSlim => "mslim",
        })
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fieldlines" => Ok(AgentKind::FieldLines),
            "mslim" => Ok(AgentKind::MSlim),
            _ => Err(Error::config(format!("unknown policy '{s}' (expected fieldlines or mslim)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Explore,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub mpn: MpnConfig,
    /// Append per-node traffic counters to the node inputs.
    pub node_features: bool,
    pub init_tau: f64,
    pub init_sigma: f64,
}

impl AgentConfig {
    pub fn new(kind: AgentKind) -> Self {
        AgentConfig { kind, mpn: MpnConfig::default(), node_features: false, init_tau: 4.0, init_sigma: 1.0 }
    }
}

/// Policy input for one step.
#[derive(Clone, Debug)]
pub struct Observation {
    pub graph: Arc<DiGraph>,
    pub batch: GraphBatch,
    /// Destination/edge pairs and distance features (FieldLines only).
    pub pairs: Option<Arc<PairIndex>>,
}

/// What the policy sampled, in its own parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionChoice {
    /// Chosen pair index per decision segment.
    NextHop(Vec<usize>),
    /// Pre-softplus Gaussian sample per graph edge.
    Weights(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct ActionSample {
    pub action: RoutingAction,
    pub choice: ActionChoice,
    pub log_prob: f64,
    /// Mean per-decision entropy (diagnostic).
    pub entropy: f64,
    pub weights: Option<LinkWeights>,
}

/// Per-episode state a learned policy carries between steps.
#[derive(Clone, Debug, Default)]
pub struct AgentEpisode {
    pub history: FrameHistory,
    /// Previous link weight per stable edge id.
    prev_weights: Vec<f64>,
    /// History of previous weights aligned with `history`.
    weight_frames: std::collections::VecDeque<Vec<f64>>,
    dist_cache: Option<(Vec<bool>, Arc<Vec<Vec<f64>>>)>,
    pub apsp_calls: u64,
}

#[derive(Clone, Debug)]
enum Net {
    FieldLines(fieldlines::FieldLinesNet),
    MSlim(mslim::MSlimNet),
}

/// A learned policy: architecture, parameters (actor and critic) and input
/// normalization.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    net: Net,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub version: u32,
    pub config: AgentConfig,
    pub arch_hash: String,
    pub params: ParamStore,
    pub normalizer: Normalizer,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Agent {
    pub fn new(config: AgentConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let net = match config.kind {
            AgentKind::FieldLines => Net::FieldLines(fieldlines::FieldLinesNet::new(&mut store, &config, &mut rng)),
            AgentKind::MSlim => Net::MSlim(mslim::MSlimNet::new(&mut store, &config, &mut rng)),
        };
        Agent { config, store, normalizer: Normalizer::default(), net }
    }

    pub fn kind(&self) -> AgentKind {
        self.config.kind
    }

    /// Hash over the configuration and every parameter name and shape.
    pub fn arch_hash(&self) -> String {
        let mut text = serde_json::to_string(&self.config).unwrap_or_default();
        for (i, name) in self.store.names().iter().enumerate() {
            let t = self.store.tensor(i);
            text.push_str(&format!("|{name}:{}x{}", t.rows, t.cols));
        }
        sha256_hex(text.as_bytes())
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            arch_hash: self.arch_hash(),
            params: self.store.clone(),
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &AgentCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let mut agent = Agent::new(ckpt.config.clone(), 0);
        if agent.arch_hash() != ckpt.arch_hash {
            return Err(Error::config("checkpoint architecture hash does not match its configuration"));
        }
        let mut params = ckpt.params.clone();
        params.reindex();
        agent.store.load_from(&params).map_err(|_| Error::config("checkpoint parameters do not match the architecture"))?;
        agent.normalizer = ckpt.normalizer.clone();
        Ok(agent)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(&self.checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: AgentCheckpoint = serde_json::from_str(&text)?;
        Agent::from_checkpoint(&ckpt)
    }

    pub fn tau(&self) -> f64 {
        match &self.net {
            Net::FieldLines(n) => self.store.tensor(n.log_tau).item().exp(),
            Net::MSlim(_) => f64::NAN,
        }
    }

    pub fn sigma(&self) -> f64 {
        match &self.net {
            Net::MSlim(n) => self.store.tensor(n.log_sigma).item().exp(),
            Net::FieldLines(_) => f64::NAN,
        }
    }

    /// Starts an episode from the environment's initial state.
    pub fn begin_episode(&self, env: &dyn Environment) -> AgentEpisode {
        self.begin_episode_from(env.initial_state())
    }

    pub fn begin_episode_from(&self, s0: NetworkState) -> AgentEpisode {
        let mut ep = AgentEpisode::default();
        ep.prev_weights = vec![0.0; s0.edges.len()];
        ep.weight_frames.push_back(ep.prev_weights.clone());
        ep.history.push(s0);
        ep
    }

    /// Registers the outcome of a step.
    pub fn record(&self, ep: &mut AgentEpisode, sample: &ActionSample, graph: &DiGraph, next: NetworkState) {
        if let Some(w) = &sample.weights {
            for (e, wv) in graph.edges.iter().zip(&w.0) {
                ep.prev_weights[e.id] = *wv;
            }
        }
        if ep.weight_frames.len() == FRAMES {
            ep.weight_frames.pop_front();
        }
        ep.weight_frames.push_back(ep.prev_weights.clone());
        ep.history.push(next);
    }

    /// Folds the latest state of `ep` into the input statistics (training).
    pub fn update_normalizer(&mut self, ep: &AgentEpisode, graph: &DiGraph) {
        let Some(latest) = ep.history.latest() else {
            return;
        };
        self.normalizer.update_state(latest);
        if let Net::MSlim(_) = self.net {
            let w = ep.weight_frames.back().cloned().unwrap_or_default();
            let rows: Vec<[f64; 2]> =
                graph.edges.iter().map(|e| [latest.edges[e.id][crate::sim::feat::E_LU], w[e.id]]).collect();
            self.normalizer.line.update(rows.iter().map(|r| &r[..]));
        }
    }

    /// Builds the policy input for the current step.
    pub fn observe(&self, ep: &mut AgentEpisode, graph: &DiGraph) -> Result<Observation> {
        if ep.history.is_empty() {
            return Err(Error::Runtime("observation requested before the episode started".into()));
        }
        let graph = Arc::new(graph.clone());
        match &self.net {
            Net::FieldLines(_) => {
                let dist = distances(ep, &graph);
                fieldlines::observe(&self.config, &self.normalizer, &ep.history, graph, &dist)
            }
            Net::MSlim(_) => Ok(mslim::observe(&self.normalizer, &ep.history, &ep.weight_frames, graph)),
        }
    }

    /// Chooses an action; M-Slim counts one APSP pass in `ep`.
    pub fn act(&self, ep: &mut AgentEpisode, obs: &Observation, mode: Mode, rng: &mut Rng) -> Result<ActionSample> {
        match &self.net {
            Net::FieldLines(net) => net.act(&self.store, obs, mode, rng),
            Net::MSlim(net) => {
                ep.apsp_calls += 1;
                net.act(&self.store, obs, mode, rng)
            }
        }
    }

    /// Re-expresses a routing action as a policy choice (FieldLines) and
    /// returns it with its log-probability.
    pub fn choice_for(&self, obs: &Observation, action: &RoutingAction) -> Result<(ActionChoice, f64)> {
        match &self.net {
            Net::FieldLines(net) => net.choice_for(&self.store, obs, action),
            Net::MSlim(_) => Err(Error::config("link-weight policies cannot imitate next-hop actions")),
        }
    }

    /// Full destination × edge rating matrix (FieldLines only).
    pub fn rating_matrix(&self, obs: &Observation) -> Result<Tensor> {
        match &self.net {
            Net::FieldLines(net) => Ok(net.rating_matrix(&self.store, obs)),
            Net::MSlim(_) => Err(Error::config("link-weight policies produce no rating matrix")),
        }
    }

    pub fn value(&self, obs: &Observation) -> f64 {
        let mut tape = Tape::new();
        let (_, v) = self.evaluate_batch(&mut tape, &[obs], None);
        tape.value(v).item()
    }

    /// Log-probabilities of `choices` (when given) and value estimates for a
    /// batch of observations, as `B×1` tape variables.
    pub fn evaluate_batch(
        &self,
        tape: &mut Tape,
        obs: &[&Observation],
        choices: Option<&[&ActionChoice]>,
    ) -> (Option<Var>, Var) {
        match &self.net {
            Net::FieldLines(net) => net.evaluate_batch(tape, &self.store, obs, choices),
            Net::MSlim(net) => net.evaluate_batch(tape, &self.store, obs, choices),
        }
    }

    /// Zeroes the last layer of the actor readout (used in tests).
    pub fn zero_actor_head(&mut self) {
        let ids = match &self.net {
            Net::FieldLines(n) => n.actor_head_ids(),
            Net::MSlim(n) => n.actor_head_ids(),
        };
        for id in ids {
            let t = self.store.tensor_mut(id);
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Zeroes the last layer of the critic readout (used in tests).
    pub fn zero_critic_head(&mut self) {
        let ids = match &self.net {
            Net::FieldLines(n) => n.critic_head_ids(),
            Net::MSlim(n) => n.critic_head_ids(),
        };
        for id in ids {
            let t = self.store.tensor_mut(id);
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// EIGRP shortest-path costs of the surviving topology, recomputed only when
/// the set of live edges changes.
fn distances(ep: &mut AgentEpisode, graph: &DiGraph) -> Arc<Vec<Vec<f64>>> {
    let key: Vec<bool> = {
        let mut k = vec![false; ep.prev_weights.len().max(graph.edges.iter().map(|e| e.id + 1).max().unwrap_or(0))];
        for e in &graph.edges {
            k[e.id] = true;
        }
        k
    };
    if let Some((cached, d)) = &ep.dist_cache {
        if *cached == key {
            return d.clone();
        }
    }
    ep.apsp_calls += 1;
    let d = Arc::new(crate::graph::apsp_dijkstra(graph, &graph.eigrp_weights()));
    ep.dist_cache = Some((key, d.clone()));
    d
}

/// Stacks normalized rows of up to `FRAMES` states into one feature row.
fn stack<F>(frames: &[Option<&NetworkState>; FRAMES], width: usize, out: &mut Vec<f64>, mut f: F)
where
    F: FnMut(&NetworkState, &mut Vec<f64>),
{
    for fr in frames {
        match fr {
            Some(s) => f(s, out),
            None => out.extend(std::iter::repeat_n(0.0, width)),
        }
    }
}

fn tensor_rows(rows: usize, data: Vec<f64>) -> Tensor {
    let cols = if rows == 0 { 0 } else { data.len() / rows };
    Tensor::from_vec(rows, cols, data)
}

/// Evaluation-time wrapper: any routing policy the harness can run.
pub trait RoutingPolicy {
    fn name(&self) -> String;
    fn reset(&mut self, env: &dyn Environment);
    fn act(&mut self, env: &dyn Environment, topology_changed: bool, rng: &mut Rng) -> Result<RoutingAction>;
    fn observe_outcome(&mut self, graph: &DiGraph, state: &NetworkState);
    fn apsp_calls(&self) -> u64;
}

/// A learned agent acting greedily with frozen normalization.
#[derive(Clone, Debug)]
pub struct GreedyAgent {
    pub agent: Agent,
    episode: AgentEpisode,
    last: Option<ActionSample>,
    apsp_total: u64,
}

impl GreedyAgent {
    pub fn new(agent: Agent) -> Self {
        GreedyAgent { agent, episode: AgentEpisode::default(), last: None, apsp_total: 0 }
    }
}

impl RoutingPolicy for GreedyAgent {
    fn name(&self) -> String {
        self.agent.kind().to_string()
    }

    fn reset(&mut self, env: &dyn Environment) {
        self.apsp_total += self.episode.apsp_calls;
        self.episode = self.agent.begin_episode(env);
        self.last = None;
    }

    fn act(&mut self, env: &dyn Environment, _topology_changed: bool, rng: &mut Rng) -> Result<RoutingAction> {
        let graph = env.graph();
        let obs = self.agent.observe(&mut self.episode, &graph)?;
        let sample = self.agent.act(&mut self.episode, &obs, Mode::Greedy, rng)?;
        let action = sample.action.clone();
        self.last = Some(sample);
        Ok(action)
    }

    fn observe_outcome(&mut self, graph: &DiGraph, state: &NetworkState) {
        let sample = self.last.take().expect("observe_outcome without act");
        self.agent.record(&mut self.episode, &sample, graph, state.clone());
    }

    fn apsp_calls(&self) -> u64 {
        self.apsp_total + self.episode.apsp_calls
    }
}
