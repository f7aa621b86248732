//! Weibull-driven link failure schedules restricted to non-cut edges.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::topology::is_connected;
use super::Topology;
use crate::util::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkFailureEvent {
    pub step: usize,
    pub u: usize,
    pub v: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureParams {
    pub weibull_shape: f64,
    pub weibull_scale: f64,
    /// Normalized time unit of one step at which the Weibull CDF is
    /// evaluated. Calibrated so that nx-S episodes average about 2.38
    /// failures over 100 steps.
    pub step_time_unit: f64,
}

/// Calibration constant for [`FailureParams::step_time_unit`].
pub const CALIBRATED_STEP_TIME_UNIT: f64 = 1.318e-7;

impl Default for FailureParams {
    fn default() -> Self {
        FailureParams {
            weibull_shape: 0.8,
            weibull_scale: 0.001,
            step_time_unit: CALIBRATED_STEP_TIME_UNIT,
        }
    }
}

impl FailureParams {
    /// Per-step, per-link failure probability. A non-positive scale disables
    /// failures.
    pub fn step_probability(&self) -> f64 {
        if self.weibull_scale <= 0.0 || self.step_time_unit <= 0.0 {
            return 0.0;
        }
        1.0 - (-(self.step_time_unit / self.weibull_scale).powf(self.weibull_shape)).exp()
    }
}

pub fn generate_link_failures(
    topology: &Topology,
    horizon_steps: usize,
    params: &FailureParams,
    rng: &mut Rng,
) -> Vec<LinkFailureEvent> {
    let p = params.step_probability();
    let n = topology.nodes.len();
    let mut alive = vec![true; topology.links.len()];
    let mut events = Vec::new();
    if p <= 0.0 {
        return events;
    }
    for step in 0..horizon_steps {
        for idx in 0..topology.links.len() {
            if !alive[idx] {
                continue;
            }
            if rng.random::<f64>() >= p {
                continue;
            }
            alive[idx] = false;
            let survivors = topology
                .links
                .iter()
                .zip(&alive)
                .filter(|(_, &a)| a)
                .map(|(l, _)| (l.u, l.v));
            if is_connected(n, survivors) {
                let l = &topology.links[idx];
                events.push(LinkFailureEvent { step, u: l.u, v: l.v });
            } else {
                // cut edge: suppressed
                alive[idx] = true;
            }
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Link;
    use crate::util::rng_from_seed;

    fn topo(edges: &[(usize, usize)], n: usize) -> Topology {
        Topology {
            nodes: (0..n).collect(),
            links: edges
                .iter()
                .map(|&(u, v)| Link { u, v, datarate_bps: 1e8, delay_ms: 5.0, buffer_bytes: 125_000 })
                .collect(),
            potentials: vec![1.0; n],
        }
    }

    #[test]
    fn tree_never_fails() {
        let t = topo(&[(0, 1), (1, 2), (1, 3), (3, 4)], 5);
        let params = FailureParams { step_time_unit: 1e-3, ..FailureParams::default() };
        assert!(params.step_probability() > 0.5);
        let mut rng = rng_from_seed(1);
        assert!(generate_link_failures(&t, 100, &params, &mut rng).is_empty());
    }

    #[test]
    fn zero_scale_never_fails() {
        let t = topo(&[(0, 1), (1, 2), (0, 2)], 3);
        let params = FailureParams { weibull_scale: 0.0, ..FailureParams::default() };
        let mut rng = rng_from_seed(1);
        assert!(generate_link_failures(&t, 100, &params, &mut rng).is_empty());
    }

    #[test]
    fn failures_keep_graph_connected() {
        let edges: Vec<_> = (0..6).flat_map(|u| ((u + 1)..6).map(move |v| (u, v))).collect();
        let t = topo(&edges, 6);
        let params = FailureParams { step_time_unit: 1e-4, ..FailureParams::default() };
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let ev = generate_link_failures(&t, 100, &params, &mut rng);
            assert!(!ev.is_empty());
            let mut alive: Vec<(usize, usize)> = edges.clone();
            let mut last = 0;
            for e in &ev {
                assert!(e.step >= last);
                last = e.step;
                alive.retain(|&x| x != (e.u, e.v));
                assert!(is_connected(6, alive.iter().copied()));
            }
        }
    }
}
