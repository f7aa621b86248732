//! Node traffic potentials and link attributes derived from a layout.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::topology::SimpleGraph;
use super::{Link, Topology};
use crate::util::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialParams {
    /// Tradeoff between degree weights (1.0) and location weights (0.0).
    pub lambda_c: f64,
    pub w_max: f64,
}

impl Default for PotentialParams {
    fn default() -> Self {
        PotentialParams { lambda_c: 0.6, w_max: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub mean_delay_ms: f64,
    pub min_delay_ms: f64,
    pub min_datarate_bps: f64,
    pub max_datarate_bps: f64,
    pub delta_rand: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            mean_delay_ms: 5.0,
            min_delay_ms: 1.0,
            min_datarate_bps: 50e6,
            max_datarate_bps: 200e6,
            delta_rand: 0.1,
        }
    }
}

const DEGENERATE_SPAN: f64 = 1e-12;

/// Min-max rescales into `[lo, hi]`. All-equal input maps to `degenerate`.
pub fn rescale(values: &[f64], lo: f64, hi: f64, degenerate: f64) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min > DEGENERATE_SPAN * max.abs().max(1.0)) {
        return vec![degenerate; values.len()];
    }
    values
        .iter()
        .map(|&x| lo + (x - min) / (max - min) * (hi - lo))
        .collect()
}

/// `c' = λ·w_d + (1-λ)·w_p`, normalized by its maximum.
pub fn combine_potentials(degree_weights: &[f64], location_weights: &[f64], lambda_c: f64) -> Vec<f64> {
    let raw: Vec<f64> = degree_weights
        .iter()
        .zip(location_weights)
        .map(|(&wd, &wp)| lambda_c * wd + (1.0 - lambda_c) * wp)
        .collect();
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|&x| x / max).collect()
}

/// Location weights are inversely proportional to the distance from the
/// origin, degree weights follow node degrees; both land in `[1, w_max]`.
pub fn compute_node_potentials(graph: &SimpleGraph, layout: &[[f64; 2]], params: &PotentialParams) -> Vec<f64> {
    let inv_dist: Vec<f64> = layout
        .iter()
        .map(|p| 1.0 / (p[0] * p[0] + p[1] * p[1]).sqrt().max(1e-9))
        .collect();
    let degrees: Vec<f64> = graph.degrees().into_iter().map(|d| d as f64).collect();
    let w_p = rescale(&inv_dist, 1.0, params.w_max, 1.0);
    let w_d = rescale(&degrees, 1.0, params.w_max, 1.0);
    combine_potentials(&w_d, &w_p, params.lambda_c)
}

fn perturb(x: f64, delta: f64, rng: &mut Rng) -> f64 {
    if delta <= 0.0 {
        return x;
    }
    x * rng.random_range((1.0 - delta)..=(1.0 + delta))
}

/// Buffer capacity in bytes: datarate × round-trip delay.
pub fn buffer_bytes(datarate_bps: f64, delay_ms: f64) -> u64 {
    (datarate_bps * 2.0 * delay_ms / 1000.0 / 8.0).round() as u64
}

/// Delays from layout distances (perturbed, rescaled to the target mean,
/// floored at the minimum delay); datarates from the larger endpoint
/// potential (perturbed, rescaled into the datarate interval).
pub fn assign_link_attributes(
    graph: &SimpleGraph,
    layout: &[[f64; 2]],
    potentials: &[f64],
    params: &LinkParams,
    rng: &mut Rng,
) -> Topology {
    let raw_delays: Vec<f64> = graph
        .edges
        .iter()
        .map(|&(u, v)| {
            let d = ((layout[u][0] - layout[v][0]).powi(2) + (layout[u][1] - layout[v][1]).powi(2)).sqrt();
            perturb(d, params.delta_rand, rng)
        })
        .collect();
    let mean = crate::util::mean(&raw_delays);
    let delays: Vec<f64> = if mean > 0.0 && raw_delays.len() > 0 {
        raw_delays
            .iter()
            .map(|&d| (d * params.mean_delay_ms / mean).max(params.min_delay_ms))
            .collect()
    } else {
        vec![params.mean_delay_ms.max(params.min_delay_ms); raw_delays.len()]
    };

    let raw_rates: Vec<f64> = graph
        .edges
        .iter()
        .map(|&(u, v)| perturb(potentials[u].max(potentials[v]), params.delta_rand, rng))
        .collect();
    let rates = rescale(
        &raw_rates,
        params.min_datarate_bps,
        params.max_datarate_bps,
        params.max_datarate_bps,
    );

    let links = graph
        .edges
        .iter()
        .zip(delays.iter().zip(&rates))
        .map(|(&(u, v), (&delay_ms, &datarate_bps))| Link {
            u,
            v,
            datarate_bps,
            delay_ms,
            buffer_bytes: buffer_bytes(datarate_bps, delay_ms),
        })
        .collect();
    Topology {
        nodes: (0..graph.n).collect(),
        links,
        potentials: potentials.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;
    use approx::assert_relative_eq;

    #[test]
    fn hand_evaluated_potentials() {
        let c = combine_potentials(&[1.0, 10.0], &[10.0, 1.0], 0.6);
        assert_relative_eq!(c[0], 0.71875, epsilon = 1e-12);
        assert_relative_eq!(c[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_degrees_with_full_degree_weight() {
        // ring: all degrees equal
        let g = SimpleGraph::from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)]);
        let layout = [[0.1, 0.0], [0.0, 0.7], [-0.3, 0.0], [0.0, -1.0]];
        let c = compute_node_potentials(&g, &layout, &PotentialParams { lambda_c: 1.0, w_max: 10.0 });
        assert!(c.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn nearer_origin_gets_larger_potential() {
        let g = SimpleGraph::from_edges(2, [(0, 1)]);
        let layout = [[1.0, 0.0], [-2.0, 0.0]];
        let c = compute_node_potentials(&g, &layout, &PotentialParams::default());
        assert!(c[0] > c[1]);
        assert_eq!(c[0], 1.0);
    }

    #[test]
    fn buffer_rule() {
        assert_eq!(buffer_bytes(1e8, 5.0), 125_000);
    }

    #[test]
    fn single_link_delay_is_mean() {
        let g = SimpleGraph::from_edges(2, [(0, 1)]);
        let layout = [[0.3, 0.0], [-0.3, 0.0]];
        let mut rng = rng_from_seed(0);
        let topo = assign_link_attributes(&g, &layout, &[1.0, 1.0], &LinkParams::default(), &mut rng);
        assert_relative_eq!(topo.links[0].delay_ms, 5.0, epsilon = 1e-12);
        assert_eq!(topo.links[0].datarate_bps, 200e6);
    }

    #[test]
    fn equal_potentials_without_noise_give_max_rate() {
        let g = SimpleGraph::from_edges(3, [(0, 1), (1, 2), (0, 2)]);
        let layout = [[0.0, 1.0], [1.0, 0.0], [-1.0, -1.0]];
        let params = LinkParams { delta_rand: 0.0, ..LinkParams::default() };
        let mut rng = rng_from_seed(0);
        let topo = assign_link_attributes(&g, &layout, &[0.5, 0.5, 0.5], &params, &mut rng);
        assert!(topo.links.iter().all(|l| l.datarate_bps == 200e6));
    }

    #[test]
    fn degenerate_rescale_maps_to_requested_value() {
        assert_eq!(rescale(&[3.0, 3.0], 1.0, 10.0, 1.0), vec![1.0, 1.0]);
        assert_eq!(rescale(&[0.0, 1.0, 0.5], 1.0, 10.0, 1.0), vec![1.0, 10.0, 5.5]);
    }
}
