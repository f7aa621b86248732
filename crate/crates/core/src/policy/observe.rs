use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::sim::{NetworkState, D_EDGE, D_GLOBAL, D_NODE};

pub const FRAMES: usize = 4;
pub const NORM_CLIP: f64 = 10.0;
const NORM_EPS: f64 = 1e-8;
const PRIOR_COUNT: f64 = 1e-4;

/// Running per-feature mean and variance (parallel Welford merge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats { count: PRIOR_COUNT, mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) {
        let d = self.dim();
        let mut n = 0.0;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            for k in 0..d {
                sum[k] += r[k];
            }
            n += 1.0;
        }
        if n == 0.0 {
            return;
        }
        let bmean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for r in &rows {
            for k in 0..d {
                sq[k] += (r[k] - bmean[k]).powi(2);
            }
        }
        let total = self.count + n;
        for k in 0..d {
            let delta = bmean[k] - self.mean[k];
            let m_a = self.var[k] * self.count;
            let m_b = sq[k];
            let m2 = m_a + m_b + delta * delta * self.count * n / total;
            self.mean[k] += delta * n / total;
            self.var[k] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, k: usize, x: f64) -> f64 {
        ((x - self.mean[k]) / (self.var[k] + NORM_EPS).sqrt()).clamp(-NORM_CLIP, NORM_CLIP)
    }
}

/// Input normalization statistics for every feature family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub global: RunningStats,
    pub edge: RunningStats,
    pub node: RunningStats,
    /// Per-edge (LU, previous weight) inputs of the link-weight policy.
    pub line: RunningStats,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            global: RunningStats::new(D_GLOBAL),
            edge: RunningStats::new(D_EDGE),
            node: RunningStats::new(D_NODE),
            line: RunningStats::new(2),
        }
    }
}

impl Normalizer {
    /// Folds the live entities of one state into the statistics.
    pub fn update_state(&mut self, state: &NetworkState) {
        self.global.update([&state.global[..]]);
        self.edge.update(
            state.edges.iter().zip(&state.edge_alive).filter(|(_, a)| **a).map(|(r, _)| &r[..]),
        );
        if let Some(nodes) = &state.nodes {
            self.node.update(nodes.iter().map(|r| &r[..]));
        }
    }
}

/// The latest states, oldest first; missing frames are `None` (zero padding).
#[derive(Clone, Debug, Default)]
pub struct FrameHistory {
    frames: VecDeque<NetworkState>,
}

impl FrameHistory {
    pub fn new() -> Self {
        FrameHistory::default()
    }

    pub fn push(&mut self, state: NetworkState) {
        if self.frames.len() == FRAMES {
            self.frames.pop_front();
        }
        self.frames.push_back(state);
    }

    pub fn latest(&self) -> Option<&NetworkState> {
        self.frames.back()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Exactly `FRAMES` slots, oldest first.
    pub fn padded(&self) -> [Option<&NetworkState>; FRAMES] {
        let mut out = [None; FRAMES];
        let pad = FRAMES - self.frames.len();
        for (i, s) in self.frames.iter().enumerate() {
            out[pad + i] = Some(s);
        }
        out
    }
}
