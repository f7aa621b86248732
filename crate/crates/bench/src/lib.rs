//! Fixtures shared by the criterion benchmarks.

use routelab_core::graph::DiGraph;
use routelab_core::scenario::{generate_scenario, ScenarioConfig};
use routelab_core::{NetworkScenario, Preset};

/// A deterministic scenario of the given size class.
pub fn scenario(preset: Preset, m_traffic: f64) -> NetworkScenario {
    generate_scenario(&ScenarioConfig::new(preset, 7, m_traffic, 0.5)).expect("preset scenario")
}

pub fn graph(preset: Preset) -> DiGraph {
    DiGraph::from_topology(&scenario(preset, 0.25).topology)
}
