//! Per-step inference timing and APSP accounting across topology sizes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::{make_env, EnvKind};
use crate::error::Result;
use crate::policy::RoutingPolicy;
use crate::scenario::{generate_scenario, Preset, ScenarioConfig};
use crate::sim::SimConfig;
use crate::util::{derive_seed, fmt_csv, mean, quantile_sorted, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub presets: Vec<Preset>,
    pub episodes: usize,
    /// Low load keeps simulation cost out of the way.
    pub m_traffic: f64,
    pub seed: u64,
    pub env: EnvKind,
    pub sim: SimConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            presets: vec![Preset::XS, Preset::S, Preset::M, Preset::L],
            episodes: 30,
            m_traffic: 0.25,
            seed: 0,
            env: EnvKind::Fluid,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy: String,
    pub preset: Preset,
    pub mean_nodes: f64,
    pub steps: usize,
    pub step_ms_mean: f64,
    pub step_ms_p95: f64,
    /// APSP calls on the first step of an episode, averaged over episodes.
    pub apsp_first_step: f64,
    /// APSP calls per step after the first.
    pub apsp_per_later_step: f64,
}

/// Times `act` of the policies built by `make` (called once per preset) on
/// failure-free episodes. Simulation time is excluded.
pub fn bench_inference(
    make: &mut dyn FnMut() -> Result<Box<dyn RoutingPolicy>>,
    config: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &preset in &config.presets {
        let mut policy = make()?;
        let mut times = Vec::new();
        let mut nodes = Vec::new();
        let (mut first, mut later, mut later_steps) = (0u64, 0u64, 0usize);
        for ep in 0..config.episodes {
            let seed = derive_seed(derive_seed(config.seed, 0xbe7c), ep as u64);
            let scenario = generate_scenario(&ScenarioConfig::new(preset, seed, config.m_traffic, 0.0))?;
            nodes.push(scenario.topology.num_nodes() as f64);
            let mut env = make_env(config.env, &scenario, &config.sim);
            let mut rng = rng_from_seed(derive_seed(seed, 0xac7));
            policy.reset(env.as_ref());
            let mut step = 0;
            while !env.is_done() {
                let changed = env.begin_step();
                let graph = env.graph();
                let before = policy.apsp_calls();
                let t0 = Instant::now();
                let action = policy.act(env.as_ref(), changed, &mut rng)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
                let calls = policy.apsp_calls() - before;
                if step == 0 {
                    first += calls;
                } else {
                    later += calls;
                    later_steps += 1;
                }
                let (state, _) = env.step(&action)?;
                policy.observe_outcome(&graph, &state);
                step += 1;
            }
        }
        let steps = times.len();
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            policy: policy.name(),
            preset,
            mean_nodes: mean(&nodes),
            steps,
            step_ms_mean: mean(&times),
            step_ms_p95: quantile_sorted(&times, 0.95),
            apsp_first_step: first as f64 / config.episodes.max(1) as f64,
            apsp_per_later_step: if later_steps == 0 { 0.0 } else { later as f64 / later_steps as f64 },
        });
    }
    Ok(rows)
}

/// CSV: `policy,preset,mean_nodes,steps,step_ms_mean,step_ms_p95,apsp_first_step,apsp_per_later_step`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("policy,preset,mean_nodes,steps,step_ms_mean,step_ms_p95,apsp_first_step,apsp_per_later_step\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.policy,
            r.preset,
            fmt_csv(r.mean_nodes),
            r.steps,
            fmt_csv(r.step_ms_mean),
            fmt_csv(r.step_ms_p95),
            fmt_csv(r.apsp_first_step),
            fmt_csv(r.apsp_per_later_step)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Agent, AgentConfig, AgentKind, Baseline, BaselineKind, GreedyAgent};

    fn tiny() -> BenchConfig {
        BenchConfig {
            presets: vec![Preset::XS],
            episodes: 2,
            sim: SimConfig { horizon_steps: 12, ..SimConfig::default() },
            ..BenchConfig::default()
        }
    }

    fn run(kind: AgentKind) -> BenchRow {
        let mut make = || Ok(Box::new(GreedyAgent::new(Agent::new(AgentConfig::new(kind), 1))) as Box<dyn RoutingPolicy>);
        bench_inference(&mut make, &tiny()).unwrap().remove(0)
    }

    #[test]
    fn apsp_accounting_per_architecture() {
        let fl = run(AgentKind::FieldLines);
        assert_eq!((fl.apsp_first_step, fl.apsp_per_later_step), (1.0, 0.0));
        let ms = run(AgentKind::MSlim);
        assert_eq!((ms.apsp_first_step, ms.apsp_per_later_step), (1.0, 1.0));
        assert_eq!(ms.steps, 24);
        assert!(ms.step_ms_p95 >= 0.0 && ms.step_ms_mean > 0.0);
    }

    #[test]
    fn baselines_compute_paths_once() {
        let mut make = || Ok(Box::new(Baseline::new(BaselineKind::Eigrp)) as Box<dyn RoutingPolicy>);
        let rows = bench_inference(&mut make, &tiny()).unwrap();
        assert_eq!(rows[0].apsp_first_step, 1.0);
        assert_eq!(rows[0].apsp_per_later_step, 0.0);
        let csv = bench_csv(&rows);
        assert!(csv.lines().nth(1).unwrap().starts_with("eigrp,nx-XS,"));
    }
}
