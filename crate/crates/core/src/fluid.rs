//! Fluid flow-network model: traffic-matrix volumes routed wholly along
//! shortest paths, with link utilization as the only observable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{weights_to_action, DiGraph, LinkWeights, RoutingAction};
use crate::scenario::{LinkFailureEvent, NetworkScenario, Topology, TrafficDemand, TrafficKind};
use crate::sim::{feat, NetworkState, StepMetrics, D_EDGE, D_GLOBAL};

/// Average bytes per step between ordered node pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl TrafficMatrix {
    pub fn zeros(n: usize) -> Self {
        TrafficMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_dense(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::config(format!("traffic matrix needs {} entries, got {}", n * n, data.len())));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("traffic matrix entries must be finite and non-negative"));
        }
        Ok(TrafficMatrix { n, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn add(&mut self, i: usize, j: usize, bytes: f64) {
        if i != j {
            self.data[i * self.n + j] += bytes;
        }
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        TrafficMatrix { n: self.n, data: self.data.iter().map(|v| v * k).collect() }
    }
}

/// Sums bytes sent per ordered pair during one step.
pub fn tm_from_step(n: usize, sent: &[(usize, usize, f64)]) -> TrafficMatrix {
    let mut tm = TrafficMatrix::zeros(n);
    for &(i, j, b) in sent {
        tm.add(i, j, b);
    }
    tm
}

#[derive(Clone, Debug, PartialEq)]
pub struct FluidLoad {
    /// Bytes per graph edge.
    pub load: Vec<f64>,
    /// Load over per-step capacity, not clamped.
    pub lu: Vec<f64>,
    pub max_lu: f64,
    /// Volume that could not be routed (loops or missing next hops).
    pub unrouted: f64,
}

/// Routes every TM entry along the next hops of `action`.
pub fn route_tm(graph: &DiGraph, tm: &TrafficMatrix, action: &RoutingAction, step_ms: f64) -> FluidLoad {
    let mut load = vec![0.0; graph.num_edges()];
    let mut unrouted = 0.0;
    for i in 0..tm.n {
        for j in 0..tm.n {
            let vol = tm.get(i, j);
            if vol <= 0.0 {
                continue;
            }
            let edges = action.route(i, j).and_then(|path| {
                path.windows(2).map(|w| graph.edge_between(w[0], w[1])).collect::<Option<Vec<_>>>()
            });
            match edges {
                Some(edges) => edges.into_iter().for_each(|e| load[e] += vol),
                None => unrouted += vol,
            }
        }
    }
    let lu: Vec<f64> = graph
        .edges
        .iter()
        .zip(&load)
        .map(|(e, l)| l / (e.datarate_bps * step_ms / 1000.0 / 8.0))
        .collect();
    let max_lu = lu.iter().copied().fold(0.0, f64::max);
    FluidLoad { load, lu, max_lu, unrouted }
}

/// Distributes the TM along weight-induced shortest paths.
pub fn fluid_step(graph: &DiGraph, tm: &TrafficMatrix, weights: &LinkWeights, step_ms: f64) -> FluidLoad {
    route_tm(graph, tm, &weights_to_action(graph, weights), step_ms)
}

/// Per-demand sending rate in the fluid abstraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidRates {
    pub tcp_rate_bps: f64,
    pub default_udp_rate_bps: f64,
}

impl Default for FluidRates {
    fn default() -> Self {
        FluidRates { tcp_rate_bps: 1e9, default_udp_rate_bps: 1e9 }
    }
}

/// Spreads each demand's volume uniformly over its sending interval and
/// accumulates it into per-step traffic matrices.
pub fn demand_tms(
    n: usize,
    demands: &[TrafficDemand],
    steps: usize,
    step_ms: f64,
    rates: FluidRates,
) -> Vec<TrafficMatrix> {
    let mut tms = vec![TrafficMatrix::zeros(n); steps];
    let horizon = steps as f64 * step_ms;
    for d in demands {
        let rate = match d.kind {
            TrafficKind::Tcp => rates.tcp_rate_bps,
            TrafficKind::Udp => d.udp_rate_bps.unwrap_or(rates.default_udp_rate_bps),
        };
        let start = d.arrival_ms;
        let duration = d.bytes as f64 * 8.0 / rate * 1000.0;
        let end = start + duration;
        let first = (start / step_ms).floor().max(0.0) as usize;
        let mut k = first;
        while k < steps {
            let (a, b) = (k as f64 * step_ms, (k + 1) as f64 * step_ms);
            if a >= end || a >= horizon {
                break;
            }
            let overlap = b.min(end) - a.max(start);
            if overlap > 0.0 {
                let share = if duration > 0.0 { overlap / duration } else { 1.0 };
                tms[k].add(d.src, d.dst, d.bytes as f64 * share);
            }
            k += 1;
        }
    }
    tms
}

/// Fluid counterpart of the packet simulator: same topology, failures and
/// observation layout, but only LU is populated.
#[derive(Clone, Debug)]
pub struct FluidSim {
    topology: Topology,
    link_alive: Vec<bool>,
    failures: Vec<LinkFailureEvent>,
    next_failure: usize,
    tms: Vec<TrafficMatrix>,
    step_ms: f64,
    step_index: usize,
}

impl FluidSim {
    pub fn new(scenario: &NetworkScenario, horizon_steps: usize, step_ms: f64, rates: FluidRates) -> Self {
        let n = scenario.topology.num_nodes();
        FluidSim {
            topology: scenario.topology.clone(),
            link_alive: vec![true; scenario.topology.links.len()],
            failures: scenario.failures.clone(),
            next_failure: 0,
            tms: demand_tms(n, &scenario.demands, horizon_steps, step_ms, rates),
            step_ms,
            step_index: 0,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn link_alive(&self) -> &[bool] {
        &self.link_alive
    }

    pub fn graph(&self) -> DiGraph {
        DiGraph::with_alive(&self.topology, &self.link_alive)
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn horizon(&self) -> usize {
        self.tms.len()
    }

    pub fn traffic_matrix(&self, step: usize) -> Option<&TrafficMatrix> {
        self.tms.get(step)
    }

    pub fn apply_pending_failures(&mut self) -> bool {
        let mut changed = false;
        while self.next_failure < self.failures.len() && self.failures[self.next_failure].step <= self.step_index {
            let f = &self.failures[self.next_failure];
            if let Some(l) = self.topology.link_index(f.u, f.v) {
                changed |= std::mem::replace(&mut self.link_alive[l], false);
            }
            self.next_failure += 1;
        }
        changed
    }

    fn state(&self, lu_by_id: Option<&[f64]>) -> NetworkState {
        let num = 2 * self.topology.links.len();
        let mut edges = vec![[0.0; D_EDGE]; num];
        let mut alive = vec![false; num];
        for (idx, l) in self.topology.links.iter().enumerate() {
            if !self.link_alive[idx] {
                continue;
            }
            for id in [2 * idx, 2 * idx + 1] {
                alive[id] = true;
                edges[id][feat::E_CAPACITY] = l.buffer_bytes as f64;
                edges[id][feat::E_DATARATE] = l.datarate_bps;
                edges[id][feat::E_DELAY] = l.delay_ms;
                if let Some(lu) = lu_by_id {
                    edges[id][feat::E_LU] = lu[id];
                }
            }
        }
        let mut global = [0.0; D_GLOBAL];
        if let Some(lu) = lu_by_id {
            let live: Vec<f64> = (0..num).filter(|&i| alive[i]).map(|i| lu[i]).collect();
            global[feat::MAX_LU] = live.iter().copied().fold(0.0, f64::max);
            global[feat::AVG_TDU] = if live.is_empty() { 0.0 } else { live.iter().sum::<f64>() / live.len() as f64 };
        }
        NetworkState { global, edges, edge_alive: alive, nodes: None }
    }

    pub fn initial_state(&self) -> NetworkState {
        self.state(None)
    }

    pub fn step(&mut self, action: &RoutingAction) -> Result<(NetworkState, StepMetrics)> {
        self.apply_pending_failures();
        let graph = self.graph();
        action.validate(&graph)?;
        let tm = self.tms.get(self.step_index).cloned().unwrap_or_else(|| TrafficMatrix::zeros(graph.n));
        let load = route_tm(&graph, &tm, action, self.step_ms);
        let mut lu_by_id = vec![0.0; 2 * self.topology.links.len()];
        for (e, lu) in graph.edges.iter().zip(&load.lu) {
            lu_by_id[e.id] = *lu;
        }
        let state = self.state(Some(&lu_by_id));
        let total = tm.total();
        let delivered = (total - load.unrouted).max(0.0);
        let metrics = StepMetrics {
            max_lu: load.max_lu,
            sent_bytes: total.round() as u64,
            received_bytes: delivered.round() as u64,
            goodput_mb: delivered / 1e6,
            ..StepMetrics::default()
        };
        self.step_index += 1;
        Ok((state, metrics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, Preset, ScenarioConfig};
    use crate::util::rng_from_seed;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn path_graph(n: usize, rate: f64) -> DiGraph {
        let pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let mut g = DiGraph::from_pairs(n, &pairs);
        for e in &mut g.edges {
            e.datarate_bps = rate;
        }
        g
    }

    #[test]
    fn zero_tm_gives_zero_lu() {
        let g = path_graph(4, 1e8);
        let r = fluid_step(&g, &TrafficMatrix::zeros(4), &g.ospf_weights(), 5.0);
        assert!(r.lu.iter().all(|&x| x == 0.0));
        assert_eq!(r.max_lu, 0.0);
    }

    #[test]
    fn single_demand_loads_its_path_only() {
        let g = path_graph(4, 1e8);
        let mut tm = TrafficMatrix::zeros(4);
        tm.add(0, 2, 1000.0);
        let r = fluid_step(&g, &tm, &g.ospf_weights(), 5.0);
        for (e, lu) in g.edges.iter().zip(&r.lu) {
            let on_path = (e.src, e.dst) == (0, 1) || (e.src, e.dst) == (1, 2);
            assert_eq!(*lu > 0.0, on_path);
        }
    }

    #[test]
    fn shared_edge_reaches_full_utilization() {
        // capacity of 2 units per step; two unit demands share edge 1→2
        let unit = 1e8 * 0.005 / 8.0 / 2.0;
        let g = path_graph(3, 1e8);
        let mut tm = TrafficMatrix::zeros(3);
        tm.add(0, 2, unit);
        tm.add(1, 2, unit);
        let r = fluid_step(&g, &tm, &g.ospf_weights(), 5.0);
        let e = g.edge_between(1, 2).unwrap();
        assert_relative_eq!(r.lu[e], 1.0, epsilon = 1e-12);
        tm.add(1, 2, unit);
        let r = fluid_step(&g, &tm, &g.ospf_weights(), 5.0);
        assert_relative_eq!(r.lu[e], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn tm_from_step_sums_pairs() {
        assert_eq!(tm_from_step(3, &[]).total(), 0.0);
        let tm = tm_from_step(3, &[(0, 1, 1000.0)]);
        assert_eq!(tm.get(0, 1), 1000.0);
        let tm = tm_from_step(3, &[(0, 1, 1000.0), (0, 1, 500.0), (2, 0, 1.0)]);
        assert_eq!(tm.get(0, 1), 1500.0);
        assert_eq!(tm.total(), 1501.0);
    }

    #[test]
    fn demand_volume_is_spread_over_sending_time() {
        let d = TrafficDemand {
            arrival_ms: 2.5,
            src: 0,
            dst: 1,
            bytes: 10_000,
            kind: TrafficKind::Udp,
            udp_rate_bps: Some(8e6),
        };
        // 10 ms at 8 Mbps: 2.5 ms in step 0, 5 ms in step 1, 2.5 ms in step 2
        let tms = demand_tms(2, &[d], 10, 5.0, FluidRates::default());
        assert_relative_eq!(tms[0].get(0, 1), 2500.0);
        assert_relative_eq!(tms[1].get(0, 1), 5000.0);
        assert_relative_eq!(tms[2].get(0, 1), 2500.0);
        assert_eq!(tms[3].total(), 0.0);
    }

    #[test]
    fn fluid_env_reports_lu_and_conserves_volume() {
        let sc = generate_scenario(&ScenarioConfig::new(Preset::XS, 4, 1.5, 0.5).with_failures(true)).unwrap();
        let mut env = FluidSim::new(&sc, 100, 5.0, FluidRates::default());
        let mut total_lu = 0.0;
        while env.step_index() < env.horizon() {
            env.apply_pending_failures();
            let g = env.graph();
            let a = weights_to_action(&g, &g.eigrp_weights());
            let (s, m) = env.step(&a).unwrap();
            assert_eq!(m.sent_bytes, m.received_bytes);
            assert_eq!(s.global[feat::MAX_LU], m.max_lu);
            total_lu += m.max_lu;
        }
        assert!(total_lu > 0.0);
    }

    fn random_case(seed: u64) -> (DiGraph, TrafficMatrix, LinkWeights) {
        let sc = generate_scenario(&ScenarioConfig::new(Preset::XS, seed, 1.0, 0.0)).unwrap();
        let g = DiGraph::from_topology(&sc.topology);
        let mut rng = rng_from_seed(seed);
        let w = crate::graph::random_link_weights(&g, &mut rng);
        let n = g.n;
        let data = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { (k * 37 % 11) as f64 * 100.0 }).collect();
        (g, TrafficMatrix::from_dense(n, data).unwrap(), w)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lu_is_linear_in_tm(seed in 0u64..500, k in 0.1f64..10.0) {
            let (g, tm, w) = random_case(seed);
            let a = fluid_step(&g, &tm, &w, 5.0);
            let b = fluid_step(&g, &tm.scaled(k), &w, 5.0);
            for (x, y) in a.lu.iter().zip(&b.lu) {
                prop_assert!((x * k - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }

        #[test]
        fn weight_scaling_leaves_lu_unchanged(seed in 0u64..500, k in 0.01f64..100.0) {
            let (g, tm, w) = random_case(seed);
            let a = fluid_step(&g, &tm, &w, 5.0);
            let b = fluid_step(&g, &tm, &w.scaled(k), 5.0);
            prop_assert_eq!(a.lu, b.lu);
        }

        #[test]
        fn volume_entering_equals_volume_delivered(seed in 0u64..500) {
            let (g, tm, w) = random_case(seed);
            let r = fluid_step(&g, &tm, &w, 5.0);
            prop_assert_eq!(r.unrouted, 0.0);
            // load into each destination equals the traffic addressed to it
            for z in 0..g.n {
                let into: f64 = g.edges.iter().zip(&r.load).filter(|(e, _)| e.dst == z).map(|(_, l)| l).sum();
                let out: f64 = g.edges.iter().zip(&r.load).filter(|(e, _)| e.src == z).map(|(_, l)| l).sum();
                let addressed: f64 = (0..g.n).map(|i| tm.get(i, z)).sum();
                let originated: f64 = (0..g.n).map(|j| tm.get(z, j)).sum();
                prop_assert!((into - out - (addressed - originated)).abs() <= 1e-6);
            }
        }
    }
}
