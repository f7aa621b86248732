//! Discrete-event packet-level simulator: full-duplex point-to-point links
//! with drop-tail transmit buffers, UDP and TCP sources, destination-based
//! forwarding and per-step monitoring.

mod engine;
mod tcp;

pub use engine::{PacketSim, SimCounters};
pub use tcp::{NewReno, RtoEstimator, TcpConfig, TcpEvent};

use serde::{Deserialize, Serialize};

use crate::graph::DiGraph;

pub const GLOBAL_FEATURES: [&str; 9] = [
    "maxLU",
    "avgTDU",
    "avgPacketDelay",
    "maxPacketDelay",
    "avgPacketJitter",
    "sentBytes",
    "receivedBytes",
    "droppedBytes",
    "retransmittedBytes",
];
pub const EDGE_FEATURES: [&str; 10] = [
    "LU",
    "txQueueMaxLoad",
    "txQueueLastLoad",
    "bufferCapacity",
    "datarate",
    "delay",
    "sentBytes",
    "receivedBytes",
    "droppedBytes",
    "droppedPackets",
];
pub const NODE_FEATURES: [&str; 3] = ["sentBytes", "receivedBytes", "retransmittedBytes"];

pub const D_GLOBAL: usize = GLOBAL_FEATURES.len();
pub const D_EDGE: usize = EDGE_FEATURES.len();
pub const D_NODE: usize = NODE_FEATURES.len();

pub mod feat {
    pub const MAX_LU: usize = 0;
    pub const AVG_TDU: usize = 1;
    pub const AVG_DELAY: usize = 2;
    pub const MAX_DELAY: usize = 3;
    pub const AVG_JITTER: usize = 4;
    pub const SENT: usize = 5;
    pub const RECEIVED: usize = 6;
    pub const DROPPED: usize = 7;
    pub const RETRANSMITTED: usize = 8;

    pub const E_LU: usize = 0;
    pub const E_QUEUE_MAX: usize = 1;
    pub const E_QUEUE_LAST: usize = 2;
    pub const E_CAPACITY: usize = 3;
    pub const E_DATARATE: usize = 4;
    pub const E_DELAY: usize = 5;
    pub const E_SENT: usize = 6;
    pub const E_RECEIVED: usize = 7;
    pub const E_DROPPED: usize = 8;
    pub const E_DROPPED_PACKETS: usize = 9;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub step_ms: f64,
    pub horizon_steps: usize,
    pub max_payload_bytes: u64,
    pub header_bytes: u64,
    pub ttl: u8,
    pub node_features: bool,
    pub tcp: TcpConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            step_ms: 5.0,
            horizon_steps: 100,
            max_payload_bytes: 1472,
            header_bytes: 28,
            ttl: 64,
            node_features: false,
            tcp: TcpConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn step_ns(&self) -> u64 {
        (self.step_ms * 1e6).round() as u64
    }
}

/// Monitoring snapshot of one step. Edge rows are indexed by the stable
/// directed edge id (`2 * link + direction`); rows of failed links stay zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub global: [f64; D_GLOBAL],
    pub edges: Vec<[f64; D_EDGE]>,
    pub edge_alive: Vec<bool>,
    pub nodes: Option<Vec<[f64; D_NODE]>>,
}

impl NetworkState {
    /// Edge feature row for an edge of `graph` (looked up by stable id).
    pub fn edge(&self, graph: &DiGraph, edge: usize) -> &[f64; D_EDGE] {
        &self.edges[graph.edges[edge].id]
    }
}

/// Per-step performance metrics. Byte counters are application payload bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// MB (10⁶ bytes) received during the step.
    pub goodput_mb: f64,
    pub avg_delay_ms: f64,
    pub max_delay_ms: f64,
    pub avg_jitter_ms: f64,
    pub drop_ratio: f64,
    pub max_lu: f64,
    pub sent_bytes: u64,
    pub received_bytes: u64,
    pub dropped_bytes: u64,
    pub retransmitted_bytes: u64,
}

impl StepMetrics {
    pub fn drop_ratio_of(dropped: u64, received: u64) -> f64 {
        let denom = dropped + received;
        if denom == 0 {
            0.0
        } else {
            dropped as f64 / denom as f64
        }
    }
}
