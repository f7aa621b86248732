//! Scenario synthesis: random topologies with derived link attributes,
//! gravity-model demand streams and link failure schedules, all
//! reproducible from one seed.

mod attributes;
mod failures;
mod topology;
mod traffic;

pub use attributes::{
    assign_link_attributes, buffer_bytes, combine_potentials, compute_node_potentials, rescale, LinkParams,
    PotentialParams,
};
pub use failures::{generate_link_failures, FailureParams, LinkFailureEvent, CALIBRATED_STEP_TIME_UNIT};
pub use topology::{
    barabasi_albert, erdos_renyi, fruchterman_reingold, generate_graph, generate_topology, is_connected,
    pick_model, watts_strogatz, GraphModel, Preset, SimpleGraph, LAYOUT_ITERATIONS, LAYOUT_SEED,
};
pub use traffic::{
    generate_traffic, potential_matrix, sample_log_logistic, sample_pareto, TrafficDemand, TrafficKind,
    TrafficParams,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::util::{derive_seed, rng_from_seed, round_sig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub u: usize,
    pub v: usize,
    pub datarate_bps: f64,
    pub delay_ms: f64,
    /// Per-direction transmit buffer capacity.
    pub buffer_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<usize>,
    pub links: Vec<Link>,
    pub potentials: Vec<f64>,
}

impl Topology {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Index of the link joining `u` and `v`, in either orientation.
    pub fn link_index(&self, u: usize, v: usize) -> Option<usize> {
        self.links
            .iter()
            .position(|l| (l.u == u && l.v == v) || (l.u == v && l.v == u))
    }

    pub fn simple_graph(&self) -> SimpleGraph {
        SimpleGraph::from_edges(self.num_nodes(), self.links.iter().map(|l| (l.u, l.v)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkScenario {
    pub seed: u64,
    pub preset: Preset,
    pub topology: Topology,
    pub demands: Vec<TrafficDemand>,
    pub failures: Vec<LinkFailureEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Forces a graph model; chosen at random among the allowed ones when `None`.
    pub model: Option<GraphModel>,
    pub link_failures: bool,
    pub traffic: TrafficParams,
    pub potentials: PotentialParams,
    pub links: LinkParams,
    pub failures: FailureParams,
}

impl ScenarioConfig {
    pub fn new(preset: Preset, seed: u64, m_traffic: f64, p_tcp: f64) -> Self {
        ScenarioConfig {
            preset,
            seed,
            model: None,
            link_failures: false,
            traffic: TrafficParams { m_traffic, p_tcp, ..TrafficParams::default() },
            potentials: PotentialParams::default(),
            links: LinkParams::default(),
            failures: FailureParams::default(),
        }
    }

    pub fn with_failures(mut self, enabled: bool) -> Self {
        self.link_failures = enabled;
        self
    }
}

const STREAM_TOPOLOGY: u64 = 1;
const STREAM_LINKS: u64 = 2;
const STREAM_TRAFFIC: u64 = 3;
const STREAM_FAILURES: u64 = 4;

/// Generates the topology (graph, layout, potentials, link attributes) only.
pub fn generate_topology_for(config: &ScenarioConfig) -> Result<(Topology, GraphModel)> {
    let mut rng = rng_from_seed(derive_seed(config.seed, STREAM_TOPOLOGY));
    let (lo, hi) = config.preset.node_range();
    let n = rng.random_range(lo..=hi);
    let model = match config.model {
        Some(m) => {
            if m == GraphModel::BA && hi > topology::BA_MAX_NODES {
                return Err(Error::config(format!("the BA model is not available for preset {}", config.preset)));
            }
            m
        }
        None => pick_model(n, &mut rng),
    };
    let graph = generate_graph(n, model, &mut rng)?;
    let layout = fruchterman_reingold(&graph, LAYOUT_ITERATIONS, LAYOUT_SEED);
    let potentials = compute_node_potentials(&graph, &layout, &config.potentials);
    let mut link_rng = rng_from_seed(derive_seed(config.seed, STREAM_LINKS));
    let topo = assign_link_attributes(&graph, &layout, &potentials, &config.links, &mut link_rng);
    Ok((topo, model))
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<NetworkScenario> {
    config.traffic.validate()?;
    let (topology, _) = generate_topology_for(config)?;
    let mut traffic_rng = rng_from_seed(derive_seed(config.seed, STREAM_TRAFFIC));
    let demands = generate_traffic(&topology.potentials, &config.traffic, &mut traffic_rng)?;
    let failures = if config.link_failures {
        let mut rng = rng_from_seed(derive_seed(config.seed, STREAM_FAILURES));
        generate_link_failures(&topology, config.traffic.horizon_steps, &config.failures, &mut rng)
    } else {
        Vec::new()
    };
    Ok(NetworkScenario { seed: config.seed, preset: config.preset, topology, demands, failures })
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().unwrap_or(0.0), 9);
            if let Some(num) = serde_json::Number::from_f64(x) {
                *n = num;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

impl NetworkScenario {
    /// Canonical JSON: sorted keys, floats rounded to 9 significant digits.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        round_floats(&mut value);
        Ok(serde_json::to_string(&value)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: NetworkScenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Round-trips through the canonical encoding so in-memory values match
    /// what a reader of the scenario file would see.
    pub fn canonicalized(&self) -> Result<Self> {
        Self::from_json(&self.to_canonical_json()?)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.topology.num_nodes();
        if self.topology.nodes != (0..n).collect::<Vec<_>>() {
            return Err(Error::config("node ids must be 0..n"));
        }
        for l in &self.topology.links {
            if l.u >= n || l.v >= n || l.u == l.v {
                return Err(Error::config(format!("invalid link ({}, {})", l.u, l.v)));
            }
            if !(l.datarate_bps > 0.0) || !(l.delay_ms >= 0.0) {
                return Err(Error::config("link datarate must be positive and delay non-negative"));
            }
        }
        let mut last = f64::NEG_INFINITY;
        for d in &self.demands {
            if d.src >= n || d.dst >= n || d.src == d.dst {
                return Err(Error::config(format!("invalid demand endpoints ({}, {})", d.src, d.dst)));
            }
            if d.arrival_ms < last {
                return Err(Error::config("demands must be sorted by arrival time"));
            }
            last = d.arrival_ms;
        }
        let mut last_step = 0;
        for f in &self.failures {
            if self.topology.link_index(f.u, f.v).is_none() {
                return Err(Error::config(format!("failure references unknown link ({}, {})", f.u, f.v)));
            }
            if f.step < last_step {
                return Err(Error::config("failures must be sorted by step"));
            }
            last_step = f.step;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig::new(Preset::XS, 42, 1.5, 0.5).with_failures(true);
        let a = generate_scenario(&cfg).unwrap().to_canonical_json().unwrap();
        let b = generate_scenario(&cfg).unwrap().to_canonical_json().unwrap();
        assert_eq!(a, b);
        let other = generate_scenario(&ScenarioConfig::new(Preset::XS, 43, 1.5, 0.5)).unwrap();
        assert_ne!(a, other.to_canonical_json().unwrap());
    }

    #[test]
    fn canonical_json_is_stable_after_reload() {
        let cfg = ScenarioConfig::new(Preset::XS, 7, 0.75, 0.5);
        let s = generate_scenario(&cfg).unwrap();
        let text = s.to_canonical_json().unwrap();
        let reloaded = NetworkScenario::from_json(&text).unwrap();
        assert_eq!(reloaded.to_canonical_json().unwrap(), text);
        assert!(text.starts_with("{\"demands\":"));
        assert!(text.contains("\"t_ms\""));
    }

    #[test]
    fn scenario_invariants() {
        for seed in 0..20 {
            let cfg = ScenarioConfig::new(Preset::XS, seed, 0.75, 0.5);
            let s = generate_scenario(&cfg).unwrap();
            s.validate().unwrap();
            let t = &s.topology;
            assert!(t.simple_graph().is_connected());
            let max = t.potentials.iter().copied().fold(0.0, f64::max);
            assert_eq!(max, 1.0);
            for l in &t.links {
                assert!(l.delay_ms >= 1.0);
                assert!(l.datarate_bps >= 0.9 * 50e6 && l.datarate_bps <= 1.1 * 200e6);
                assert_eq!(l.buffer_bytes, buffer_bytes(l.datarate_bps, l.delay_ms));
            }
        }
    }

    #[test]
    fn invalid_scenario_rejected() {
        let cfg = ScenarioConfig::new(Preset::XS, 1, 0.25, 0.0);
        let mut s = generate_scenario(&cfg).unwrap();
        s.demands.push(TrafficDemand {
            arrival_ms: 1.0,
            src: 0,
            dst: 0,
            bytes: 10,
            kind: TrafficKind::Udp,
            udp_rate_bps: Some(1e9),
        });
        assert!(s.validate().is_err());
    }
}
