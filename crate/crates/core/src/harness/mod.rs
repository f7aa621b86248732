//! Seed-paired evaluation of routing approaches, inference benchmarks and
//! config-driven experiments.

mod bench;
mod experiment;
mod stats;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use bench::{bench_inference, bench_csv, BenchConfig, BenchRow};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, Manifest, PlanStage};
pub use stats::{paired_t_test, PairedTest};

use crate::env::{make_env, EnvKind};
use crate::error::{Error, Result};
use crate::graph::{action_fluctuation, RoutingAction};
use crate::policy::{Agent, Baseline, BaselineKind, GreedyAgent, RoutingPolicy};
use crate::scenario::{generate_scenario, NetworkScenario, Preset, ScenarioConfig};
use crate::sim::SimConfig;
use crate::util::{derive_seed, fmt_csv, mean, quantile_sorted, rng_from_seed};

/// Reported per-episode metrics, in CSV order.
pub const METRICS: [&str; 7] =
    ["goodput_mb", "avg_delay_ms", "max_delay_ms", "avg_jitter_ms", "drop_ratio", "max_lu", "action_fluctuation"];

/// Means of the reported metrics, aligned with [`METRICS`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub goodput_mb: f64,
    pub avg_delay_ms: f64,
    pub max_delay_ms: f64,
    pub avg_jitter_ms: f64,
    pub drop_ratio: f64,
    pub max_lu: f64,
    pub action_fluctuation: f64,
}

impl MetricSet {
    pub fn values(&self) -> [f64; 7] {
        [
            self.goodput_mb,
            self.avg_delay_ms,
            self.max_delay_ms,
            self.avg_jitter_ms,
            self.drop_ratio,
            self.max_lu,
            self.action_fluctuation,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        MetricSet {
            goodput_mb: v[0],
            avg_delay_ms: v[1],
            max_delay_ms: v[2],
            avg_jitter_ms: v[3],
            drop_ratio: v[4],
            max_lu: v[5],
            action_fluctuation: v[6],
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        METRICS.iter().position(|m| *m == metric).map(|i| self.values()[i])
    }

    fn combine(sets: &[MetricSet], f: impl Fn(&[f64]) -> f64) -> MetricSet {
        let mut out = [0.0; 7];
        for (k, o) in out.iter_mut().enumerate() {
            let col: Vec<f64> = sets.iter().map(|s| s.values()[k]).collect();
            *o = f(&col);
        }
        MetricSet::from_values(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub preset: Preset,
    pub m_traffic: f64,
    pub p_tcp: f64,
    pub link_failures: bool,
    pub episodes: usize,
    pub seed: u64,
    pub env: EnvKind,
    /// Report only the better-performing half of each approach's runs.
    pub best_half: bool,
    pub sim: SimConfig,
}

impl EvalConfig {
    pub fn new(preset: Preset, m_traffic: f64, p_tcp: f64) -> Self {
        EvalConfig {
            preset,
            m_traffic,
            p_tcp,
            link_failures: false,
            episodes: preset.default_eval_episodes(),
            seed: 0,
            env: EnvKind::Packet,
            best_half: false,
            sim: SimConfig::default(),
        }
    }

    /// The shared evaluation scenario sequence.
    pub fn scenario_configs(&self) -> Vec<ScenarioConfig> {
        (0..self.episodes)
            .map(|i| {
                let s = derive_seed(derive_seed(self.seed, 0xe7a1), i as u64);
                ScenarioConfig::new(self.preset, s, self.m_traffic, self.p_tcp).with_failures(self.link_failures)
            })
            .collect()
    }
}

/// Averages over the steps of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario_seed: u64,
    pub metrics: MetricSet,
    pub apsp_calls: u64,
    #[serde(skip)]
    pub step_times_ms: Vec<f64>,
}

/// One parameterization of an approach (a baseline, or one training seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub mean: MetricSet,
    pub episodes: Vec<EpisodeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproachReport {
    pub name: String,
    /// Raw results of every run, selected or not.
    pub runs: Vec<RunResult>,
    /// Indices of the runs entering the aggregates.
    pub selected: Vec<usize>,
    pub mean: MetricSet,
    pub min: MetricSet,
    pub max: MetricSet,
    /// `mean / EIGRP mean` per metric; `None` where the EIGRP value is 0.
    pub relative: Vec<Option<f64>>,
    pub apsp_calls_per_episode: f64,
    /// Paired test of per-episode goodput against EIGRP.
    pub goodput_vs_eigrp: PairedTest,
}

impl ApproachReport {
    /// Per-episode values of `metric`, averaged over the selected runs.
    pub fn episode_values(&self, metric: &str) -> Vec<f64> {
        let k = METRICS.iter().position(|m| *m == metric).expect("known metric");
        let n = self.runs.first().map_or(0, |r| r.episodes.len());
        (0..n)
            .map(|i| mean(&self.selected.iter().map(|&r| self.runs[r].episodes[i].metrics.values()[k]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn relative(&self, metric: &str) -> Option<f64> {
        METRICS.iter().position(|m| *m == metric).and_then(|k| self.relative[k])
    }
}

/// Wall-clock inference cost per approach (not part of the deterministic
/// report).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub approach: String,
    pub step_ms_mean: f64,
    pub step_ms_p95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub scenario_seeds: Vec<u64>,
    pub approaches: Vec<ApproachReport>,
    #[serde(skip)]
    pub timing: Vec<TimingRow>,
}

/// An approach to evaluate: a baseline or a set of trained agents (one per
/// training seed).
#[derive(Clone, Debug)]
pub enum Approach {
    Baseline(BaselineKind),
    Learned { name: String, agents: Vec<(String, Agent)> },
}

impl Approach {
    pub fn name(&self) -> String {
        match self {
            Approach::Baseline(k) => k.to_string(),
            Approach::Learned { name, .. } => name.clone(),
        }
    }

    /// Loads checkpoints; the name defaults to the agent kind.
    pub fn load(name: Option<&str>, paths: &[&Path]) -> Result<Approach> {
        if paths.is_empty() {
            return Err(Error::config("no checkpoints given"));
        }
        let mut agents = Vec::new();
        for p in paths {
            let agent = Agent::load(p).map_err(|e| e.context(format!("loading checkpoint {}", p.display())))?;
            let label = p.parent().and_then(|d| d.file_name()).map_or_else(|| p.display().to_string(), |d| d.to_string_lossy().into_owned());
            agents.push((label, agent));
        }
        let kind = agents[0].1.kind();
        if agents.iter().any(|(_, a)| a.kind() != kind) {
            return Err(Error::config("checkpoints of one approach mix architectures"));
        }
        Ok(Approach::Learned { name: name.map_or_else(|| kind.to_string(), str::to_string), agents })
    }

    fn policies(&self, sim: &SimConfig) -> Result<Vec<(String, Box<dyn RoutingPolicy>)>> {
        match self {
            Approach::Baseline(k) => Ok(vec![(k.to_string(), Box::new(Baseline::new(*k)) as Box<dyn RoutingPolicy>)]),
            Approach::Learned { agents, .. } => agents
                .iter()
                .map(|(label, a)| {
                    if a.config.node_features != sim.node_features {
                        return Err(Error::config(format!(
                            "checkpoint '{label}' expects node features {}, the simulator provides {}",
                            a.config.node_features, sim.node_features
                        )));
                    }
                    Ok((label.clone(), Box::new(GreedyAgent::new(a.clone())) as Box<dyn RoutingPolicy>))
                })
                .collect(),
        }
    }
}

/// Runs one episode; returns step-averaged metrics.
pub fn run_episode(
    policy: &mut dyn RoutingPolicy,
    scenario: &NetworkScenario,
    env_kind: EnvKind,
    sim: &SimConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    let mut env = make_env(env_kind, scenario, sim);
    let mut rng = rng_from_seed(derive_seed(seed, 0xac7));
    policy.reset(env.as_ref());
    let apsp_before = policy.apsp_calls();
    let mut prev: Option<RoutingAction> = None;
    let mut fluct = Vec::new();
    let mut steps = Vec::new();
    let mut times = Vec::new();
    while !env.is_done() {
        let changed = env.begin_step();
        let graph = env.graph();
        let t0 = Instant::now();
        let action = policy.act(env.as_ref(), changed, &mut rng)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        if let Some(p) = &prev {
            fluct.push(action_fluctuation(p, &action)?);
        }
        let (state, m) = env.step(&action)?;
        policy.observe_outcome(&graph, &state);
        steps.push(m);
        prev = Some(action);
    }
    let avg = |f: fn(&crate::sim::StepMetrics) -> f64| mean(&steps.iter().map(f).collect::<Vec<_>>());
    let metrics = MetricSet {
        goodput_mb: avg(|m| m.goodput_mb),
        avg_delay_ms: avg(|m| m.avg_delay_ms),
        max_delay_ms: avg(|m| m.max_delay_ms),
        avg_jitter_ms: avg(|m| m.avg_jitter_ms),
        drop_ratio: avg(|m| m.drop_ratio),
        max_lu: avg(|m| m.max_lu),
        action_fluctuation: mean(&fluct),
    };
    Ok(EpisodeResult { scenario_seed: seed, metrics, apsp_calls: policy.apsp_calls() - apsp_before, step_times_ms: times })
}

/// Evaluates every approach on the same scenario sequence. EIGRP is added
/// when absent since all relative values refer to it.
pub fn evaluate(approaches: &[Approach], config: &EvalConfig) -> Result<EvalReport> {
    if config.episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let mut list: Vec<Approach> = approaches.to_vec();
    if !list.iter().any(|a| matches!(a, Approach::Baseline(BaselineKind::Eigrp))) {
        list.insert(0, Approach::Baseline(BaselineKind::Eigrp));
    }
    let scenario_configs = config.scenario_configs();
    let scenarios =
        scenario_configs.iter().map(generate_scenario).collect::<Result<Vec<_>>>().map_err(|e| e.context("evaluation scenarios"))?;
    let seeds: Vec<u64> = scenario_configs.iter().map(|c| c.seed).collect();

    let mut raw: Vec<(String, Vec<RunResult>)> = Vec::new();
    let mut timing = Vec::new();
    for approach in &list {
        let mut runs = Vec::new();
        let mut times = Vec::new();
        for (label, mut policy) in approach.policies(&config.sim)? {
            let mut episodes = Vec::with_capacity(scenarios.len());
            for (sc, &seed) in scenarios.iter().zip(&seeds) {
                let ep = run_episode(policy.as_mut(), sc, config.env, &config.sim, seed)
                    .map_err(|e| e.context(format!("{} ({label}), scenario seed {seed}", approach.name())))?;
                times.extend_from_slice(&ep.step_times_ms);
                episodes.push(ep);
            }
            let means: Vec<MetricSet> = episodes.iter().map(|e| e.metrics).collect();
            runs.push(RunResult { label, mean: MetricSet::combine(&means, mean), episodes });
        }
        times.sort_by(f64::total_cmp);
        timing.push(TimingRow { approach: approach.name(), step_ms_mean: mean(&times), step_ms_p95: quantile_sorted(&times, 0.95) });
        raw.push((approach.name(), runs));
    }
    let mut report = EvalReport { config: config.clone(), scenario_seeds: seeds, approaches: Vec::new(), timing };
    report.approaches = raw
        .into_iter()
        .map(|(name, runs)| ApproachReport {
            name,
            selected: (0..runs.len()).collect(),
            runs,
            mean: MetricSet::default(),
            min: MetricSet::default(),
            max: MetricSet::default(),
            relative: Vec::new(),
            apsp_calls_per_episode: 0.0,
            goodput_vs_eigrp: PairedTest { n: 0, mean_diff: 0.0, t: 0.0, p_value: 1.0 },
        })
        .collect();
    report.set_best_half(config.best_half);
    Ok(report)
}

impl EvalReport {
    pub fn approach(&self, name: &str) -> Option<&ApproachReport> {
        self.approaches.iter().find(|a| a.name == name)
    }

    /// Recomputes every aggregate from the raw runs, keeping either all runs
    /// or the better half by mean goodput.
    pub fn set_best_half(&mut self, best_half: bool) {
        self.config.best_half = best_half;
        for a in &mut self.approaches {
            let mut order: Vec<usize> = (0..a.runs.len()).collect();
            if best_half {
                order.sort_by(|&x, &y| a.runs[y].mean.goodput_mb.total_cmp(&a.runs[x].mean.goodput_mb).then(x.cmp(&y)));
                order.truncate(a.runs.len().div_ceil(2));
                order.sort_unstable();
            }
            a.selected = order;
            let sets: Vec<MetricSet> = a.selected.iter().map(|&r| a.runs[r].mean).collect();
            a.mean = MetricSet::combine(&sets, mean);
            a.min = MetricSet::combine(&sets, |v| v.iter().copied().fold(f64::INFINITY, f64::min));
            a.max = MetricSet::combine(&sets, |v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let calls: Vec<f64> =
                a.selected.iter().flat_map(|&r| a.runs[r].episodes.iter().map(|e| e.apsp_calls as f64)).collect();
            a.apsp_calls_per_episode = mean(&calls);
        }
        let eigrp = self.approach("eigrp").expect("eigrp is always evaluated");
        let (base_mean, base_goodput) = (eigrp.mean, eigrp.episode_values("goodput_mb"));
        for a in &mut self.approaches {
            a.relative = a
                .mean
                .values()
                .iter()
                .zip(base_mean.values())
                .map(|(v, b)| if b == 0.0 { None } else { Some(v / b) })
                .collect();
            a.goodput_vs_eigrp = paired_t_test(&a.episode_values("goodput_mb"), &base_goodput);
        }
    }

    /// Summary CSV: `approach,metric,mean,relative,min,max`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("approach,metric,mean,relative,min,max\n");
        for a in &self.approaches {
            for (k, metric) in METRICS.iter().enumerate() {
                let rel = a.relative[k].map_or_else(String::new, fmt_csv);
                out.push_str(&format!(
                    "{},{metric},{},{rel},{},{}\n",
                    a.name,
                    fmt_csv(a.mean.values()[k]),
                    fmt_csv(a.min.values()[k]),
                    fmt_csv(a.max.values()[k])
                ));
            }
        }
        out
    }

    /// Per-episode CSV: `approach,run,scenario_seed,<metrics>,apsp_calls`.
    pub fn episodes_csv(&self) -> String {
        let mut out = format!("approach,run,scenario_seed,{},apsp_calls\n", METRICS.join(","));
        for a in &self.approaches {
            for r in &a.runs {
                for e in &r.episodes {
                    let vals: Vec<String> = e.metrics.values().iter().map(|v| fmt_csv(*v)).collect();
                    out.push_str(&format!("{},{},{},{},{}\n", a.name, r.label, e.scenario_seed, vals.join(","), e.apsp_calls));
                }
            }
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("approach,step_ms_mean,step_ms_p95\n");
        for t in &self.timing {
            out.push_str(&format!("{},{},{}\n", t.approach, fmt_csv(t.step_ms_mean), fmt_csv(t.step_ms_p95)));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.json`, `summary.csv`, `episodes.csv` (deterministic)
    /// and `timing.csv` (wall-clock) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("report.json", self.to_json()?),
            ("summary.csv", self.summary_csv()),
            ("episodes.csv", self.episodes_csv()),
            ("timing.csv", self.timing_csv()),
        ];
        let mut out = Vec::new();
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text)?;
            out.push(p);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{AgentConfig, AgentKind};

    fn small(episodes: usize) -> EvalConfig {
        EvalConfig {
            episodes,
            seed: 4,
            sim: SimConfig { horizon_steps: 20, ..SimConfig::default() },
            ..EvalConfig::new(Preset::XS, 1.5, 0.5)
        }
    }

    #[test]
    fn eigrp_is_relative_one_and_static() {
        let report = evaluate(&[Approach::Baseline(BaselineKind::Ospf)], &small(3)).unwrap();
        assert_eq!(report.approaches[0].name, "eigrp");
        let e = report.approach("eigrp").unwrap();
        for (k, r) in e.relative.iter().enumerate() {
            if e.mean.values()[k] != 0.0 {
                assert_eq!(*r, Some(1.0));
            }
        }
        assert_eq!(e.mean.action_fluctuation, 0.0);
        assert_eq!(report.approach("ospf").unwrap().mean.action_fluctuation, 0.0);
        assert_eq!(e.goodput_vs_eigrp.p_value, 1.0);
        assert_eq!(e.apsp_calls_per_episode, 1.0);
    }

    #[test]
    fn relative_values_recompute_from_absolute() {
        let report = evaluate(&[Approach::Baseline(BaselineKind::RandomNh)], &small(2)).unwrap();
        let json: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        let base = json.approach("eigrp").unwrap().mean;
        for a in &json.approaches {
            for (k, r) in a.relative.iter().enumerate() {
                if let Some(r) = r {
                    assert_eq!(*r, a.mean.values()[k] / base.values()[k]);
                }
            }
        }
        let rnh = json.approach("random-nh").unwrap();
        assert!(rnh.mean.action_fluctuation > 0.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let agent = Agent::new(AgentConfig::new(AgentKind::FieldLines), 3);
        let approaches = [Approach::Learned { name: "fl".into(), agents: vec![("a".into(), agent)] }];
        let a = evaluate(&approaches, &small(2)).unwrap();
        let b = evaluate(&approaches, &small(2)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.summary_csv(), b.summary_csv());
        assert_eq!(a.episodes_csv(), b.episodes_csv());
    }

    #[test]
    fn best_half_is_a_post_processing_toggle() {
        let agents = (0..4).map(|s| (format!("s{s}"), Agent::new(AgentConfig::new(AgentKind::MSlim), s))).collect();
        let mut report = evaluate(&[Approach::Learned { name: "mslim".into(), agents }], &small(2)).unwrap();
        let all = report.approach("mslim").unwrap().clone();
        assert_eq!(all.selected, vec![0, 1, 2, 3]);
        report.set_best_half(true);
        let half = report.approach("mslim").unwrap();
        assert_eq!(half.selected.len(), 2);
        assert_eq!(half.runs, all.runs);
        let worst_kept = half.selected.iter().map(|&r| half.runs[r].mean.goodput_mb).fold(f64::INFINITY, f64::min);
        for r in 0..4 {
            if !half.selected.contains(&r) {
                assert!(half.runs[r].mean.goodput_mb <= worst_kept);
            }
        }
        report.set_best_half(false);
        assert_eq!(report.approach("mslim").unwrap(), &all);
    }

    #[test]
    fn node_feature_mismatch_is_a_config_error() {
        let agent = Agent::new(AgentConfig { node_features: true, ..AgentConfig::new(AgentKind::FieldLines) }, 1);
        let err = evaluate(&[Approach::Learned { name: "fl".into(), agents: vec![("a".into(), agent)] }], &small(1));
        assert!(err.unwrap_err().is_config());
    }

    #[test]
    fn csv_layout() {
        let report = evaluate(&[], &small(1)).unwrap();
        let csv = report.summary_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "approach,metric,mean,relative,min,max");
        assert_eq!(lines.len(), 1 + METRICS.len());
        assert!(lines[1].starts_with("eigrp,goodput_mb,"));
        let episodes = report.episodes_csv();
        assert_eq!(episodes.lines().count(), 2);
    }
}
