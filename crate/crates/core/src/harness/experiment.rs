//! Config-driven experiments: scenario export, optional training and a
//! seed-paired evaluation, tracked by a content-hashed manifest.
//!
//! Config keys (TOML or JSON):
//!
//! ```toml
//! seed = 1
//! preset = "nx-XS"
//! m_traffic = 1.5
//! p_tcp = 0.5
//! link_failures = false      # optional
//! horizon_steps = 100        # optional
//!
//! [scenarios]
//! count = 3
//!
//! [train]                    # optional stage
//! agent = "fieldlines"
//! iterations = 100
//! seeds = [1, 2, 3, 4]
//! env = "packet"             # optional
//! objective = "r"            # optional
//! episodes_per_iteration = 16  # optional
//!
//! [evaluate]
//! episodes = 100
//! baselines = ["eigrp", "ospf"]
//! best_half = false          # optional
//! env = "packet"             # optional
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{evaluate, Approach, EvalConfig};
use crate::env::EnvKind;
use crate::error::{Error, Result};
use crate::policy::{AgentKind, BaselineKind};
use crate::rl::{train, Objective, TrainConfig};
use crate::scenario::{generate_scenario, Preset, ScenarioConfig};
use crate::sim::SimConfig;
use crate::util::{derive_seed, sha256_hex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStage {
    pub agent: AgentKind,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub env: EnvKind,
    pub objective: Objective,
    pub episodes_per_iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStage {
    pub episodes: usize,
    pub baselines: Vec<BaselineKind>,
    pub best_half: bool,
    pub env: EnvKind,
}

/// Resolved experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: Preset,
    pub m_traffic: f64,
    pub p_tcp: f64,
    pub link_failures: bool,
    pub horizon_steps: usize,
    pub scenario_count: usize,
    pub train: Option<TrainStage>,
    pub evaluate: EvalStage,
}

fn get<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |cur, k| cur.get(k))
}

fn require<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    get(v, key).ok_or_else(|| Error::MissingKey(key.to_string()))
}

fn bad(key: &str, expected: &str) -> Error {
    Error::config(format!("key `{key}` must be {expected}"))
}

fn as_u64(v: &Value, key: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| bad(key, "a non-negative integer"))
}

fn as_f64(v: &Value, key: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| bad(key, "a number"))
}

fn as_bool(v: &Value, key: &str) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, "a boolean"))
}

fn parse_str<T: FromStr<Err = Error>>(v: &Value, key: &str) -> Result<T> {
    v.as_str().ok_or_else(|| bad(key, "a string"))?.parse().map_err(|e: Error| e.context(format!("key `{key}`")))
}

fn optional<T>(v: &Value, key: &str, default: T, f: impl Fn(&Value, &str) -> Result<T>) -> Result<T> {
    get(v, key).map_or(Ok(default), |x| f(x, key))
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid JSON config: {e}")))?
        } else {
            let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("invalid TOML config: {e}")))?;
            serde_json::to_value(table)?
        };
        Self::from_value(&value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::parse(&text)
    }

    fn from_value(v: &Value) -> Result<Self> {
        let train = match get(v, "train") {
            None => None,
            Some(_) => {
                let seeds = require(v, "train.seeds")?
                    .as_array()
                    .ok_or_else(|| bad("train.seeds", "an array of integers"))?
                    .iter()
                    .map(|s| as_u64(s, "train.seeds"))
                    .collect::<Result<Vec<_>>>()?;
                Some(TrainStage {
                    agent: parse_str(require(v, "train.agent")?, "train.agent")?,
                    iterations: as_u64(require(v, "train.iterations")?, "train.iterations")? as usize,
                    seeds,
                    env: optional(v, "train.env", EnvKind::Packet, parse_str)?,
                    objective: optional(v, "train.objective", Objective::R, parse_str)?,
                    episodes_per_iteration: optional(v, "train.episodes_per_iteration", 16, |x, k| {
                        as_u64(x, k).map(|n| n as usize)
                    })?,
                })
            }
        };
        let baselines = require(v, "evaluate.baselines")?
            .as_array()
            .ok_or_else(|| bad("evaluate.baselines", "an array of baseline names"))?
            .iter()
            .map(|b| parse_str(b, "evaluate.baselines"))
            .collect::<Result<Vec<BaselineKind>>>()?;
        let config = ExperimentConfig {
            seed: as_u64(require(v, "seed")?, "seed")?,
            preset: parse_str(require(v, "preset")?, "preset")?,
            m_traffic: as_f64(require(v, "m_traffic")?, "m_traffic")?,
            p_tcp: as_f64(require(v, "p_tcp")?, "p_tcp")?,
            link_failures: optional(v, "link_failures", false, as_bool)?,
            horizon_steps: optional(v, "horizon_steps", SimConfig::default().horizon_steps, |x, k| {
                as_u64(x, k).map(|n| n as usize)
            })?,
            scenario_count: as_u64(require(v, "scenarios.count")?, "scenarios.count")? as usize,
            train,
            evaluate: EvalStage {
                episodes: as_u64(require(v, "evaluate.episodes")?, "evaluate.episodes")? as usize,
                baselines,
                best_half: optional(v, "evaluate.best_half", false, as_bool)?,
                env: optional(v, "evaluate.env", EnvKind::Packet, parse_str)?,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_traffic > 0.0) || !(0.0..=1.0).contains(&self.p_tcp) {
            return Err(Error::config("p_tcp must lie in [0, 1] and m_traffic must be positive"));
        }
        if self.horizon_steps == 0 || self.evaluate.episodes == 0 {
            return Err(Error::config("horizon_steps and evaluate.episodes must be positive"));
        }
        for tc in self.train_configs() {
            tc.validate()?;
        }
        Ok(())
    }

    fn sim(&self) -> SimConfig {
        SimConfig { horizon_steps: self.horizon_steps, ..SimConfig::default() }
    }

    /// One training config per seed of the train stage.
    pub fn train_configs(&self) -> Vec<TrainConfig> {
        let Some(t) = &self.train else { return Vec::new() };
        let mut ppo = crate::rl::PpoConfig::default();
        let batch = t.episodes_per_iteration * self.horizon_steps;
        if batch % ppo.minibatch != 0 {
            ppo.minibatch = batch;
        }
        t.seeds
            .iter()
            .map(|&seed| TrainConfig {
                env: t.env,
                agent: t.agent,
                preset: self.preset,
                m_traffic: self.m_traffic,
                p_tcp: self.p_tcp,
                link_failures: self.link_failures,
                objective: t.objective,
                iterations: t.iterations,
                episodes_per_iteration: t.episodes_per_iteration,
                seed,
                ppo: ppo.clone(),
                sim: self.sim(),
                ..TrainConfig::default()
            })
            .collect()
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            preset: self.preset,
            m_traffic: self.m_traffic,
            p_tcp: self.p_tcp,
            link_failures: self.link_failures,
            episodes: self.evaluate.episodes,
            seed: derive_seed(self.seed, 0xe7a1),
            env: self.evaluate.env,
            best_half: self.evaluate.best_half,
            sim: self.sim(),
        }
    }

    fn scenario_configs(&self) -> Vec<ScenarioConfig> {
        (0..self.scenario_count)
            .map(|i| {
                ScenarioConfig::new(self.preset, derive_seed(derive_seed(self.seed, 0x5ce7), i as u64), self.m_traffic, self.p_tcp)
                    .with_failures(self.link_failures)
            })
            .collect()
    }

    /// Stages that a run would execute, in order.
    pub fn plan(&self) -> Vec<PlanStage> {
        let mut plan = vec![PlanStage {
            name: "scenarios".into(),
            detail: format!("{} {} scenarios, m_traffic {}, p_tcp {}", self.scenario_count, self.preset, self.m_traffic, self.p_tcp),
        }];
        if let Some(t) = &self.train {
            plan.push(PlanStage {
                name: "train".into(),
                detail: format!(
                    "{} in {} env, {} iterations x {} episodes, seeds {:?}",
                    t.agent, t.env, t.iterations, t.episodes_per_iteration, t.seeds
                ),
            });
        }
        let mut approaches: Vec<String> = self.evaluate.baselines.iter().map(|b| b.to_string()).collect();
        if let Some(t) = &self.train {
            approaches.push(t.agent.to_string());
        }
        plan.push(PlanStage {
            name: "evaluate".into(),
            detail: format!(
                "{} episodes in {} env, approaches {}{}",
                self.evaluate.episodes,
                self.evaluate.env,
                approaches.join(", "),
                if self.evaluate.best_half { ", best half of seeds" } else { "" }
            ),
        });
        plan
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStage {
    pub name: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// `ok`, `failed` or `skipped`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Run record. Holds only deterministic content, so identical configs give
/// identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub scenario_seeds: Vec<u64>,
    pub train_seeds: Vec<u64>,
    pub eval_scenario_seeds: Vec<u64>,
    pub stages: Vec<StageRecord>,
    /// sha256 of every deterministic artifact, keyed by relative path.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn failure(&self) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.status == "failed")
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub plan: Vec<PlanStage>,
    /// `None` for dry runs.
    pub manifest: Option<Manifest>,
}

struct Recorder<'a> {
    root: &'a Path,
    artifacts: BTreeMap<String, String>,
}

impl Recorder<'_> {
    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, text)?;
        self.artifacts.insert(rel.to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    }

    fn hash_file(&mut self, rel: &str) -> Result<()> {
        let bytes = std::fs::read(self.root.join(rel))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

/// Runs (or, with `dry_run`, only plans) an experiment into `out`. A failed
/// stage is recorded in the manifest and skips the remaining stages.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: &Path,
    dry_run: bool,
    mut log: impl FnMut(&str),
) -> Result<ExperimentOutcome> {
    let plan = config.plan();
    if dry_run {
        return Ok(ExperimentOutcome { plan, manifest: None });
    }
    std::fs::create_dir_all(out)?;
    let mut rec = Recorder { root: out, artifacts: BTreeMap::new() };
    let scenario_configs = config.scenario_configs();
    let eval_config = config.eval_config();
    let mut manifest = Manifest {
        config: config.clone(),
        scenario_seeds: scenario_configs.iter().map(|c| c.seed).collect(),
        train_seeds: config.train.as_ref().map_or_else(Vec::new, |t| t.seeds.clone()),
        eval_scenario_seeds: eval_config.scenario_configs().iter().map(|c| c.seed).collect(),
        stages: Vec::new(),
        artifacts: BTreeMap::new(),
    };
    let mut trained: Vec<PathBuf> = Vec::new();
    let mut failed = false;
    for stage in &plan {
        if failed {
            manifest.stages.push(StageRecord { name: stage.name.clone(), status: "skipped".into(), error: None });
            continue;
        }
        log(&format!("stage {}: {}", stage.name, stage.detail));
        let result = match stage.name.as_str() {
            "scenarios" => scenario_configs.iter().enumerate().try_for_each(|(i, sc)| {
                let text = generate_scenario(sc)?.to_canonical_json()?;
                rec.write(&format!("scenarios/scenario-{i:03}.json"), &text)
            }),
            "train" => config.train_configs().iter().try_for_each(|tc| {
                let dir = format!("train/{}-s{}", tc.agent, tc.seed);
                let output = train(tc, |row| log(&format!("  {dir} iteration {} reward {:.4}", row.iteration, row.mean_reward)))
                    .map_err(|e| e.context(format!("training seed {}", tc.seed)))?;
                output.write(&out.join(&dir))?;
                for f in ["curve.csv", "final.json", "best.json"] {
                    rec.hash_file(&format!("{dir}/{f}"))?;
                }
                trained.push(out.join(&dir).join("final.json"));
                Ok(())
            }),
            _ => (|| {
                let mut approaches: Vec<Approach> = config.evaluate.baselines.iter().map(|b| Approach::Baseline(*b)).collect();
                if !trained.is_empty() {
                    let paths: Vec<&Path> = trained.iter().map(PathBuf::as_path).collect();
                    approaches.push(Approach::load(None, &paths)?);
                }
                let report = evaluate(&approaches, &eval_config)?;
                rec.write("eval/report.json", &report.to_json()?)?;
                rec.write("eval/summary.csv", &report.summary_csv())?;
                rec.write("eval/episodes.csv", &report.episodes_csv())?;
                // wall-clock timings vary between runs and stay out of the hashes
                std::fs::write(out.join("eval/timing.csv"), report.timing_csv())?;
                Ok(())
            })(),
        };
        manifest.stages.push(match result {
            Ok(()) => StageRecord { name: stage.name.clone(), status: "ok".into(), error: None },
            Err(e) => {
                failed = true;
                StageRecord { name: stage.name.clone(), status: "failed".into(), error: Some(format!("stage {}: {e}", stage.name)) }
            }
        });
    }
    manifest.artifacts = rec.artifacts;
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentOutcome { plan, manifest: Some(manifest) })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
preset = "nx-XS"
m_traffic = 1.5
p_tcp = 0.5
horizon_steps = 10

[scenarios]
count = 2

[evaluate]
episodes = 2
baselines = ["eigrp", "ospf"]
"#;

    #[test]
    fn parses_toml_and_json() {
        let a = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(a.preset, Preset::XS);
        assert_eq!(a.evaluate.baselines, vec![BaselineKind::Eigrp, BaselineKind::Ospf]);
        assert!(a.train.is_none());
        let json = r#"{"seed": 3, "preset": "nx-XS", "m_traffic": 1.5, "p_tcp": 0.5, "horizon_steps": 10,
            "scenarios": {"count": 2}, "evaluate": {"episodes": 2, "baselines": ["eigrp", "ospf"]}}"#;
        assert_eq!(ExperimentConfig::parse(json).unwrap(), a);
    }

    #[test]
    fn missing_key_is_named() {
        for key in ["seed", "p_tcp", "count", "episodes"] {
            let text: String = BASE.lines().filter(|l| !l.starts_with(key)).collect::<Vec<_>>().join("\n");
            let err = ExperimentConfig::parse(&text).unwrap_err();
            assert!(err.is_config());
            assert!(err.to_string().contains(key), "{err}");
        }
        let err = ExperimentConfig::parse(&format!("{BASE}\n[train]\nagent = \"mslim\"\niterations = 1\n")).unwrap_err();
        assert!(matches!(err, Error::MissingKey(ref k) if k == "train.seeds"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let err = ExperimentConfig::parse(&BASE.replace("nx-XS", "nx-Q")).unwrap_err();
        assert!(err.is_config() && err.to_string().contains("preset"), "{err}");
        assert!(ExperimentConfig::parse(&BASE.replace("p_tcp = 0.5", "p_tcp = 2.0")).unwrap_err().is_config());
        assert!(ExperimentConfig::parse("seed = [").unwrap_err().is_config());
    }

    #[test]
    fn dry_run_plans_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x");
        let config = ExperimentConfig::parse(BASE).unwrap();
        let outcome = run_experiment(&config, &out, true, |_| {}).unwrap();
        assert!(outcome.manifest.is_none());
        let names: Vec<&str> = outcome.plan.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["scenarios", "evaluate"]);
        assert!(!out.exists());
    }

    #[test]
    fn reruns_give_identical_manifests() {
        let text = format!(
            "{BASE}\n[train]\nagent = \"mslim\"\niterations = 1\nseeds = [1]\nepisodes_per_iteration = 1\nenv = \"fluid\"\n"
        );
        let config = ExperimentConfig::parse(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&config, &dir.path().join("a"), false, |_| {}).unwrap().manifest.unwrap();
        let b = run_experiment(&config, &dir.path().join("b"), false, |_| {}).unwrap().manifest.unwrap();
        assert_eq!(a, b);
        assert!(a.failure().is_none());
        assert!(a.artifacts.contains_key("train/mslim-s1/final.json"));
        assert!(a.artifacts.contains_key("eval/summary.csv"));
        assert_eq!(a.stages.len(), 3);
        let summary = std::fs::read_to_string(dir.path().join("a/eval/summary.csv")).unwrap();
        assert!(summary.contains("\nmslim,goodput_mb,"));
    }

    #[test]
    fn stage_failure_is_recorded() {
        let mut config = ExperimentConfig::parse(BASE).unwrap();
        // an evaluation with no episodes fails at run time
        config.evaluate.episodes = 0;
        let dir = tempfile::tempdir().unwrap();
        let m = run_experiment(&config, dir.path(), false, |_| {}).unwrap().manifest.unwrap();
        let f = m.failure().unwrap();
        assert_eq!(f.name, "evaluate");
        assert!(f.error.as_deref().unwrap().contains("episode"));
        let on_disk: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(on_disk, m);
    }
}
