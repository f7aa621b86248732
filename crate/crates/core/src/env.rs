//! Common interface over the packet-level and fluid environments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluid::{FluidRates, FluidSim};
use crate::graph::{DiGraph, RoutingAction};
use crate::scenario::{NetworkScenario, Topology};
use crate::sim::{NetworkState, PacketSim, SimConfig, StepMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Packet,
    Fluid,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Packet => "packet",
            EnvKind::Fluid => "fluid",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "packet" => Ok(EnvKind::Packet),
            "fluid" => Ok(EnvKind::Fluid),
            other => Err(Error::config(format!("unknown environment '{other}' (expected packet or fluid)"))),
        }
    }
}

/// One episode of an environment. Each step: `begin_step` applies the
/// failures scheduled for it, the policy observes `graph()`, then `step`
/// installs the action and simulates.
pub trait Environment {
    fn initial_state(&self) -> NetworkState;
    /// Applies failures due at the upcoming step; true if the topology changed.
    fn begin_step(&mut self) -> bool;
    fn topology(&self) -> &Topology;
    fn link_alive(&self) -> &[bool];
    fn step(&mut self, action: &RoutingAction) -> Result<(NetworkState, StepMetrics)>;
    fn step_index(&self) -> usize;
    fn horizon(&self) -> usize;

    fn graph(&self) -> DiGraph {
        DiGraph::with_alive(self.topology(), self.link_alive())
    }

    fn is_done(&self) -> bool {
        self.step_index() >= self.horizon()
    }
}

impl Environment for PacketSim {
    fn initial_state(&self) -> NetworkState {
        PacketSim::initial_state(self)
    }

    fn begin_step(&mut self) -> bool {
        self.apply_pending_failures()
    }

    fn topology(&self) -> &Topology {
        PacketSim::topology(self)
    }

    fn link_alive(&self) -> &[bool] {
        PacketSim::link_alive(self)
    }

    fn step(&mut self, action: &RoutingAction) -> Result<(NetworkState, StepMetrics)> {
        PacketSim::step(self, action)
    }

    fn step_index(&self) -> usize {
        PacketSim::step_index(self)
    }

    fn horizon(&self) -> usize {
        self.config().horizon_steps
    }
}

impl Environment for FluidSim {
    fn initial_state(&self) -> NetworkState {
        FluidSim::initial_state(self)
    }

    fn begin_step(&mut self) -> bool {
        self.apply_pending_failures()
    }

    fn topology(&self) -> &Topology {
        FluidSim::topology(self)
    }

    fn link_alive(&self) -> &[bool] {
        FluidSim::link_alive(self)
    }

    fn step(&mut self, action: &RoutingAction) -> Result<(NetworkState, StepMetrics)> {
        FluidSim::step(self, action)
    }

    fn step_index(&self) -> usize {
        FluidSim::step_index(self)
    }

    fn horizon(&self) -> usize {
        FluidSim::horizon(self)
    }
}

pub fn make_env(kind: EnvKind, scenario: &NetworkScenario, config: &SimConfig) -> Box<dyn Environment> {
    match kind {
        EnvKind::Packet => Box::new(PacketSim::new(scenario, config.clone())),
        EnvKind::Fluid => {
            Box::new(FluidSim::new(scenario, config.horizon_steps, config.step_ms, FluidRates::default()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::weights_to_action;
    use crate::scenario::{generate_scenario, Preset, ScenarioConfig};

    #[test]
    fn parse_kinds() {
        assert_eq!("packet".parse::<EnvKind>().unwrap(), EnvKind::Packet);
        assert_eq!("fluid".parse::<EnvKind>().unwrap(), EnvKind::Fluid);
        assert!("ns3".parse::<EnvKind>().unwrap_err().is_config());
    }

    #[test]
    fn both_environments_run_full_episodes() {
        let sc = generate_scenario(&ScenarioConfig::new(Preset::XS, 8, 0.75, 0.5).with_failures(true)).unwrap();
        for kind in [EnvKind::Packet, EnvKind::Fluid] {
            let mut env = make_env(kind, &sc, &SimConfig::default());
            let s0 = env.initial_state();
            assert!(s0.global.iter().all(|&x| x == 0.0));
            let mut steps = 0;
            while !env.is_done() {
                env.begin_step();
                let g = env.graph();
                let a = weights_to_action(&g, &g.eigrp_weights());
                let (s, _) = env.step(&a).unwrap();
                assert_eq!(s.edges.len(), 2 * sc.topology.links.len());
                steps += 1;
            }
            assert_eq!(steps, 100);
            let dead = env.link_alive().iter().filter(|a| !**a).count();
            assert_eq!(dead, sc.failures.len());
        }
    }
}
