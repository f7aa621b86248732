//! Desk-scale laboratory for sub-second routing optimization.
//!
//! The crate is split along the life of an experiment:
//!
//! * [`scenario`] synthesizes random topologies, gravity-model traffic and
//!   link failures from a single seed.
//! * [`graph`] holds shortest-path machinery and the routing action types.
//! * [`sim`] is a discrete-event packet simulator with drop-tail buffers,
//!   UDP sources and a NewReno-style TCP.
//! * [`fluid`] is the flow-level abstraction used to contrast training
//!   environments.
//! * [`nn`] is a small reverse-mode autodiff engine with the message passing
//!   network used by both learned policies.
//! * [`policy`] contains the next-hop (FieldLines) and link-weight (M-Slim)
//!   policies together with the baselines.
//! * [`rl`] implements rewards, GAE and PPO training.
//! * [`harness`] runs evaluations, inference benchmarks and full experiments.

pub mod env;
pub mod error;
pub mod fluid;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod rl;
pub mod scenario;
pub mod sim;
pub mod util;

pub use error::{Error, Result};
pub use graph::{LinkWeights, RoutingAction};
pub use scenario::{NetworkScenario, Preset, Topology};
pub use sim::{NetworkState, StepMetrics};
