use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RoutingPolicy;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::graph::{random_action, weights_to_action, DiGraph, RandomMode, RoutingAction};
use crate::sim::NetworkState;
use crate::util::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "eigrp")]
    Eigrp,
    #[serde(rename = "ospf")]
    Ospf,
    #[serde(rename = "random-nh")]
    RandomNh,
    #[serde(rename = "random-lw")]
    RandomLw,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Eigrp, BaselineKind::Ospf, BaselineKind::RandomNh, BaselineKind::RandomLw];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Eigrp => "eigrp",
            BaselineKind::Ospf => "ospf",
            BaselineKind::RandomNh => "random-nh",
            BaselineKind::RandomLw => "random-lw",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "eigrp" => Ok(BaselineKind::Eigrp),
            "ospf" => Ok(BaselineKind::Ospf),
            "random-nh" => Ok(BaselineKind::RandomNh),
            "random-lw" => Ok(BaselineKind::RandomLw),
            _ => Err(Error::config(format!("unknown baseline '{s}'"))),
        }
    }
}

/// Classical routing. Shortest-path baselines recompute only at episode
/// start and after topology changes; random baselines redraw every step.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub kind: BaselineKind,
    cached: Option<RoutingAction>,
    apsp_calls: u64,
}

impl Baseline {
    pub fn new(kind: BaselineKind) -> Self {
        Baseline { kind, cached: None, apsp_calls: 0 }
    }

    pub fn action(&mut self, graph: &DiGraph, topology_changed: bool, rng: &mut Rng) -> RoutingAction {
        match self.kind {
            BaselineKind::Eigrp | BaselineKind::Ospf => {
                if topology_changed || self.cached.is_none() {
                    let w = if self.kind == BaselineKind::Eigrp { graph.eigrp_weights() } else { graph.ospf_weights() };
                    self.apsp_calls += 1;
                    self.cached = Some(weights_to_action(graph, &w));
                }
                self.cached.clone().expect("cached action")
            }
            BaselineKind::RandomNh => random_action(graph, RandomMode::NextHop, rng),
            BaselineKind::RandomLw => {
                self.apsp_calls += 1;
                random_action(graph, RandomMode::LinkWeight, rng)
            }
        }
    }
}

impl RoutingPolicy for Baseline {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn reset(&mut self, _env: &dyn Environment) {
        self.cached = None;
    }

    fn act(&mut self, env: &dyn Environment, topology_changed: bool, rng: &mut Rng) -> Result<RoutingAction> {
        Ok(self.action(&env.graph(), topology_changed, rng))
    }

    fn observe_outcome(&mut self, _graph: &DiGraph, _state: &NetworkState) {}

    fn apsp_calls(&self) -> u64 {
        self.apsp_calls
    }
}
