//! Gravity-model traffic demand streams.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficKind {
    Tcp,
    Udp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficDemand {
    #[serde(rename = "t_ms")]
    pub arrival_ms: f64,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub kind: TrafficKind,
    /// Constant sending rate for UDP demands, `None` for TCP.
    pub udp_rate_bps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficParams {
    pub horizon_steps: usize,
    pub step_ms: f64,
    pub m_traffic: f64,
    pub p_tcp: f64,
    pub lambda_flow: f64,
    pub beta_t: f64,
    pub alpha_s: f64,
    pub beta_s_base: f64,
    pub delta_rand: f64,
    pub interarrival_cap_ms: f64,
    pub size_cap_bytes: f64,
    pub udp_small_threshold_bytes: u64,
    pub udp_small_rate_bps: f64,
    pub udp_rate_range_bps: (f64, f64),
}

impl Default for TrafficParams {
    fn default() -> Self {
        TrafficParams {
            horizon_steps: 100,
            step_ms: 5.0,
            m_traffic: 1.5,
            p_tcp: 0.5,
            lambda_flow: 0.5,
            beta_t: 1.5,
            alpha_s: 10.0,
            beta_s_base: 0.4,
            delta_rand: 0.1,
            interarrival_cap_ms: 50.0,
            size_cap_bytes: 1e12,
            udp_small_threshold_bytes: 100_000,
            udp_small_rate_bps: 1e9,
            udp_rate_range_bps: (1e6, 5e6),
        }
    }
}

impl TrafficParams {
    /// Log-logistic scale of the per-pair interarrival time in ms.
    pub fn interarrival_scale(&self) -> f64 {
        (self.lambda_flow + 0.2) / self.m_traffic
    }

    /// Pareto shape of the demand size distribution.
    pub fn size_shape(&self) -> f64 {
        self.beta_s_base + self.lambda_flow.powf(-1.0 / 37.0).ln()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_traffic > 0.0) {
            return Err(Error::config(format!("m_traffic must be positive, got {}", self.m_traffic)));
        }
        if !(0.0..=1.0).contains(&self.p_tcp) {
            return Err(Error::config(format!("p_tcp must lie in [0, 1], got {}", self.p_tcp)));
        }
        if !(0.0..=1.0).contains(&self.lambda_flow) || self.lambda_flow == 0.0 {
            return Err(Error::config("lambda_flow must lie in (0, 1]"));
        }
        if !(self.beta_t > 0.0) || !(self.size_shape() > 0.0) {
            return Err(Error::config("distribution shapes must be positive"));
        }
        Ok(())
    }
}

/// Log-logistic sample via inverse CDF; the median equals `scale`.
pub fn sample_log_logistic(scale: f64, shape: f64, rng: &mut Rng) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    scale * (u / (1.0 - u)).powf(1.0 / shape)
}

/// Pareto (type I) sample; the minimum equals `scale`.
pub fn sample_pareto(scale: f64, shape: f64, rng: &mut Rng) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..=1.0);
    scale * u.powf(-1.0 / shape)
}

/// Gravity matrix `B = c·cᵀ` with independent multiplicative noise and a
/// zero diagonal.
pub fn potential_matrix(potentials: &[f64], delta_rand: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = potentials.len();
    let mut b = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let noise = if delta_rand > 0.0 {
                rng.random_range((1.0 - delta_rand)..=(1.0 + delta_rand))
            } else {
                1.0
            };
            if i != j {
                b[i][j] = potentials[i] * potentials[j] * noise;
            }
        }
    }
    b
}

pub fn generate_traffic(potentials: &[f64], params: &TrafficParams, rng: &mut Rng) -> Result<Vec<TrafficDemand>> {
    params.validate()?;
    let b = potential_matrix(potentials, params.delta_rand, rng);
    let horizon_ms = params.horizon_steps as f64 * params.step_ms;
    let alpha_t = params.interarrival_scale();
    let beta_s = params.size_shape();
    let n = potentials.len();

    let mut demands = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let bij = b[i][j];
            if bij <= 0.0 {
                continue;
            }
            let budget = bij * horizon_ms;
            let mut t = 0.0;
            loop {
                t += sample_log_logistic(alpha_t, params.beta_t, rng).min(params.interarrival_cap_ms);
                if t >= budget {
                    break;
                }
                let arrival_ms = (t / bij).min(horizon_ms);
                if arrival_ms >= horizon_ms {
                    break;
                }
                let size = sample_pareto(params.alpha_s, beta_s, rng).min(params.size_cap_bytes);
                let bytes = (size.round() as u64).max(params.alpha_s.ceil() as u64);
                let tcp = rng.random::<f64>() < params.p_tcp;
                let (kind, udp_rate_bps) = if tcp {
                    (TrafficKind::Tcp, None)
                } else if bytes < params.udp_small_threshold_bytes {
                    (TrafficKind::Udp, Some(params.udp_small_rate_bps))
                } else {
                    let (lo, hi) = params.udp_rate_range_bps;
                    (TrafficKind::Udp, Some(rng.random_range(lo..=hi)))
                };
                demands.push(TrafficDemand { arrival_ms, src: i, dst: j, bytes, kind, udp_rate_bps });
            }
        }
    }
    demands.sort_by(|a, b| {
        a.arrival_ms
            .total_cmp(&b.arrival_ms)
            .then(a.src.cmp(&b.src))
            .then(a.dst.cmp(&b.dst))
    });
    Ok(demands)
}
