//! Rewards, advantage estimation and PPO training of the learned policies.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{make_env, EnvKind};
use crate::error::{Error, Result};
use crate::graph::weights_to_action;
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Tape, Tensor, Var};
use crate::policy::{ActionChoice, Agent, AgentConfig, AgentKind, Mode, Observation};
use crate::scenario::{generate_scenario, Preset, ScenarioConfig};
use crate::sim::{SimConfig, StepMetrics};
use crate::util::{derive_seed, fmt_csv, mean, rng_from_seed};

/// Delay penalty factor in composite objectives.
pub const DELAY_SCALE: f64 = 5.0;
/// Drop penalty factor in composite objectives.
pub const DROP_SCALE: f64 = 0.25;

/// Reward objective: goodput `r`, drop ratio `d`, average delay `a`, max link
/// utilization `l`, or a composite of goodput and penalties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    R,
    D,
    A,
    L,
    Rd,
    Ra,
    Rda,
}

impl Objective {
    pub const ALL: [Objective; 7] =
        [Objective::R, Objective::D, Objective::A, Objective::L, Objective::Rd, Objective::Ra, Objective::Rda];

    pub fn name(self) -> &'static str {
        match self {
            Objective::R => "r",
            Objective::D => "d",
            Objective::A => "a",
            Objective::L => "l",
            Objective::Rd => "rd",
            Objective::Ra => "ra",
            Objective::Rda => "rda",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::config(format!("unknown objective '{s}' (expected one of r, d, a, l, rd, ra, rda)")))
    }
}

/// Scalar reward of one step. Delay enters in seconds.
pub fn compute_reward(m: &StepMetrics, objective: Objective) -> f64 {
    let r = m.goodput_mb;
    let d = m.drop_ratio;
    let a = m.avg_delay_ms / 1000.0;
    match objective {
        Objective::R => r,
        Objective::D => -d,
        Objective::A => -a,
        Objective::L => -m.max_lu,
        Objective::Rd => r - DROP_SCALE * d,
        Objective::Ra => r - DELAY_SCALE * a,
        Objective::Rda => r - DELAY_SCALE * a - DROP_SCALE * d,
    }
}

/// Generalized advantage estimates and returns for one episode, bootstrapping
/// the terminal value with 0.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let m = mean(adv);
    let var = adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / adv.len() as f64;
    let sd = var.sqrt() + 1e-8;
    for a in adv {
        *a = (*a - m) / sd;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub value_clip: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            epochs: 10,
            minibatch: 400,
            clip: 0.2,
            value_clip: 0.2,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            gamma: 0.99,
            gae_lambda: 0.95,
        }
    }
}

/// One environment transition as stored for the update phase.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub choice: ActionChoice,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub metrics: StepMetrics,
}

/// Transitions of whole episodes, each episode contiguous.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub episode_starts: Vec<usize>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push_episode(&mut self, episode: Vec<Transition>) {
        self.episode_starts.push(self.transitions.len());
        self.transitions.extend(episode);
    }

    /// Per-transition advantages (unnormalized) and returns.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let mut adv = Vec::with_capacity(self.len());
        let mut ret = Vec::with_capacity(self.len());
        for (k, &start) in self.episode_starts.iter().enumerate() {
            let end = self.episode_starts.get(k + 1).copied().unwrap_or(self.len());
            let ep = &self.transitions[start..end];
            let r: Vec<f64> = ep.iter().map(|t| t.reward).collect();
            let v: Vec<f64> = ep.iter().map(|t| t.value).collect();
            let (a, g) = gae(&r, &v, gamma, lambda);
            adv.extend(a);
            ret.extend(g);
        }
        (adv, ret)
    }
}

/// Clipped surrogate policy loss `-mean(min(ρA, clip(ρ)A))`.
pub fn policy_loss(tape: &mut Tape, logp: Var, old_logp: &[f64], adv: &[f64], clip: f64) -> Var {
    let old = tape.constant(Tensor::column(old_logp.to_vec()));
    let a = tape.constant(Tensor::column(adv.to_vec()));
    let diff = tape.sub(logp, old);
    let ratio = tape.exp(diff);
    let s1 = tape.mul(ratio, a);
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = tape.mul(clipped, a);
    let s = tape.min(s1, s2);
    let m = tape.mean_all(s);
    tape.scale(m, -1.0)
}

/// Clipped value loss `mean(max((v-R)², (v_old + clip(v-v_old) - R)²))`.
pub fn value_loss(tape: &mut Tape, value: Var, old_value: &[f64], returns: &[f64], clip: f64) -> Var {
    let old = tape.constant(Tensor::column(old_value.to_vec()));
    let ret = tape.constant(Tensor::column(returns.to_vec()));
    let e1 = tape.sub(value, ret);
    let l1 = tape.square(e1);
    let dv = tape.sub(value, old);
    let dv = tape.clamp(dv, -clip, clip);
    let vc = tape.add(old, dv);
    let e2 = tape.sub(vc, ret);
    let l2 = tape.square(e2);
    let l = tape.max(l1, l2);
    tape.mean_all(l)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub loss_policy: f64,
    pub loss_value: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Combined loss of one minibatch on the tape: `(total, policy, value)`.
fn minibatch_loss(
    tape: &mut Tape,
    agent: &Agent,
    rollout: &Rollout,
    idx: &[usize],
    adv: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> (Var, Var, Var) {
    let obs: Vec<&Observation> = idx.iter().map(|&i| &rollout.transitions[i].obs).collect();
    let choices: Vec<&ActionChoice> = idx.iter().map(|&i| &rollout.transitions[i].choice).collect();
    let (logp, value) = agent.evaluate_batch(tape, &obs, Some(&choices));
    let logp = logp.expect("log-probabilities requested");
    let old_logp: Vec<f64> = idx.iter().map(|&i| rollout.transitions[i].log_prob).collect();
    let old_v: Vec<f64> = idx.iter().map(|&i| rollout.transitions[i].value).collect();
    let a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
    let r: Vec<f64> = idx.iter().map(|&i| returns[i]).collect();
    let lp = policy_loss(tape, logp, &old_logp, &a, cfg.clip);
    let lv = value_loss(tape, value, &old_v, &r, cfg.value_clip);
    let scaled = tape.scale(lv, cfg.value_coef);
    (tape.add(lp, scaled), lp, lv)
}

/// Evaluates the combined PPO loss of the whole rollout without updating.
pub fn ppo_loss(agent: &Agent, rollout: &Rollout, adv: &[f64], returns: &[f64], cfg: &PpoConfig) -> f64 {
    let idx: Vec<usize> = (0..rollout.len()).collect();
    let mut tape = Tape::new();
    let (total, _, _) = minibatch_loss(&mut tape, agent, rollout, &idx, adv, returns, cfg);
    tape.value(total).item()
}

/// Runs the PPO update phase on one rollout. `adv` should already be
/// normalized. Returns mean minibatch losses.
pub fn ppo_update(
    agent: &mut Agent,
    adam: &mut Adam,
    rollout: &Rollout,
    adv: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    rng: &mut crate::util::Rng,
) -> Result<PpoStats> {
    let n = rollout.len();
    if cfg.minibatch == 0 || n % cfg.minibatch != 0 {
        return Err(Error::config(format!("minibatch size {} does not divide the batch size {n}", cfg.minibatch)));
    }
    let mut stats = PpoStats::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mb, idx) in order.chunks(cfg.minibatch).enumerate() {
            let mut tape = Tape::new();
            let (total, lp, lv) = minibatch_loss(&mut tape, agent, rollout, idx, adv, returns, cfg);
            let mut grads = tape.backward(total, &agent.store).map_err(|e| {
                Error::Numerical(format!(
                    "epoch {epoch}, minibatch {mb}: {e} (policy loss {}, value loss {})",
                    tape.value(lp).item(),
                    tape.value(lv).item()
                ))
            })?;
            stats.grad_norm += clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam.step(&mut agent.store, &grads);
            stats.loss_policy += tape.value(lp).item();
            stats.loss_value += tape.value(lv).item();
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let k = stats.minibatches as f64;
        stats.loss_policy /= k;
        stats.loss_value /= k;
        stats.grad_norm /= k;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub agent: AgentKind,
    pub preset: Preset,
    pub m_traffic: f64,
    pub p_tcp: f64,
    pub link_failures: bool,
    /// Reward objective in the packet environment; fluid training always
    /// minimizes the maximum link utilization.
    pub objective: Objective,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    /// Learning rate; `None` picks the per-architecture default.
    pub lr: Option<f64>,
    /// Warm-start iterations; `None` picks 5 for FieldLines and 0 otherwise.
    pub warm_start_iterations: Option<usize>,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: EnvKind::Packet,
            agent: AgentKind::FieldLines,
            preset: Preset::XS,
            m_traffic: 1.5,
            p_tcp: 0.5,
            link_failures: false,
            objective: Objective::R,
            iterations: 100,
            episodes_per_iteration: 16,
            lr: None,
            warm_start_iterations: None,
            seed: 0,
            ppo: PpoConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.agent {
            AgentKind::FieldLines => 5e-5,
            AgentKind::MSlim => 3e-3,
        })
    }

    pub fn warm_start_iterations(&self) -> usize {
        self.warm_start_iterations.unwrap_or(match self.agent {
            AgentKind::FieldLines => 5,
            AgentKind::MSlim => 0,
        })
    }

    pub fn effective_objective(&self) -> Objective {
        match self.env {
            EnvKind::Packet => self.objective,
            EnvKind::Fluid => Objective::L,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.episodes_per_iteration * self.sim.horizon_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.episodes_per_iteration == 0 || self.sim.horizon_steps == 0 {
            return Err(Error::config("iterations, episodes per iteration and horizon must be positive"));
        }
        if self.ppo.minibatch == 0 || self.batch_size() % self.ppo.minibatch != 0 {
            return Err(Error::config(format!(
                "minibatch size {} does not divide the batch size {}",
                self.ppo.minibatch,
                self.batch_size()
            )));
        }
        if self.agent == AgentKind::MSlim && self.warm_start_iterations() > 0 {
            return Err(Error::config("warm start imitates next-hop actions and needs the fieldlines agent"));
        }
        if !(self.lr() > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_tcp) || !(self.m_traffic > 0.0) {
            return Err(Error::config("p_tcp must lie in [0, 1] and m_traffic must be positive"));
        }
        Ok(())
    }

    /// Scenario of episode `episode` in iteration `iteration` (both 0-based).
    pub fn scenario_config(&self, iteration: usize, episode: usize) -> ScenarioConfig {
        let s = derive_seed(derive_seed(self.seed, 0x5ce0 + iteration as u64), episode as u64);
        ScenarioConfig::new(self.preset, s, self.m_traffic, self.p_tcp).with_failures(self.link_failures)
    }
}

/// One learning-curve row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_goodput: f64,
    pub mean_drop_ratio: f64,
    pub mean_avg_delay: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
}

pub const CURVE_HEADER: &str = "iteration,mean_reward,mean_goodput,mean_drop_ratio,mean_avg_delay,loss_policy,loss_value";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let fields = [r.mean_reward, r.mean_goodput, r.mean_drop_ratio, r.mean_avg_delay, r.loss_policy, r.loss_value];
        out.push_str(&r.iteration.to_string());
        for f in fields {
            out.push(',');
            out.push_str(&fmt_csv(f));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub final_agent: Agent,
    pub best_agent: Agent,
    /// 1-based iteration whose rollout had the highest mean reward.
    pub best_iteration: usize,
    pub curve: Vec<CurveRow>,
}

impl TrainOutput {
    /// Writes `curve.csv`, `final.json` and `best.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("curve.csv"), curve_csv(&self.curve))?;
        self.final_agent.save(&dir.join("final.json"))?;
        self.best_agent.save(&dir.join("best.json"))
    }
}

/// Rolls out one training episode. Warm-start episodes replace each sampled
/// action by the EIGRP routing and score it under the current policy.
pub fn rollout_episode(
    agent: &mut Agent,
    config: &TrainConfig,
    scenario: &crate::scenario::NetworkScenario,
    warm_start: bool,
    rng: &mut crate::util::Rng,
) -> Result<Vec<Transition>> {
    let mut env = make_env(config.env, scenario, &config.sim);
    let mut ep = agent.begin_episode(env.as_ref());
    let objective = config.effective_objective();
    let mut out = Vec::with_capacity(config.sim.horizon_steps);
    while !env.is_done() {
        env.begin_step();
        let graph = env.graph();
        agent.update_normalizer(&ep, &graph);
        let obs = agent.observe(&mut ep, &graph)?;
        let mut sample = agent.act(&mut ep, &obs, Mode::Explore, rng)?;
        if warm_start {
            let action = weights_to_action(&graph, &graph.eigrp_weights());
            let (choice, log_prob) = agent.choice_for(&obs, &action)?;
            sample.action = action;
            sample.choice = choice;
            sample.log_prob = log_prob;
        }
        let value = agent.value(&obs);
        let (state, metrics) = env.step(&sample.action)?;
        let reward = compute_reward(&metrics, objective);
        agent.record(&mut ep, &sample, &graph, state);
        out.push(Transition { obs, choice: sample.choice, log_prob: sample.log_prob, value, reward, metrics });
    }
    Ok(out)
}

/// Trains a fresh agent; `progress` sees each learning-curve row.
pub fn train(config: &TrainConfig, mut progress: impl FnMut(&CurveRow)) -> Result<TrainOutput> {
    config.validate()?;
    let agent_config = AgentConfig { node_features: config.sim.node_features, ..AgentConfig::new(config.agent) };
    let mut agent = Agent::new(agent_config, derive_seed(config.seed, 0xa9e7));
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr()), &agent.store);
    let mut update_rng = rng_from_seed(derive_seed(config.seed, 0x0bda7e));
    let mut curve = Vec::with_capacity(config.iterations);
    let mut best: Option<(f64, usize, Agent)> = None;
    for it in 0..config.iterations {
        let warm = it < config.warm_start_iterations();
        let mut rollout = Rollout::default();
        for e in 0..config.episodes_per_iteration {
            let sc_config = config.scenario_config(it, e);
            let scenario = generate_scenario(&sc_config)?;
            let mut rng = rng_from_seed(derive_seed(sc_config.seed, 0xac7));
            let episode = rollout_episode(&mut agent, config, &scenario, warm, &mut rng).map_err(|err| {
                Error::Runtime(format!("iteration {}, episode {e} (scenario seed {}): {err}", it + 1, sc_config.seed))
            })?;
            rollout.push_episode(episode);
        }
        let pre_update = agent.clone();
        let (mut adv, returns) = rollout.advantages(config.ppo.gamma, config.ppo.gae_lambda);
        normalize_advantages(&mut adv);
        let stats = ppo_update(&mut agent, &mut adam, &rollout, &adv, &returns, &config.ppo, &mut update_rng)
            .map_err(|err| Error::Runtime(format!("iteration {}: {err}", it + 1)))?;
        let t = &rollout.transitions;
        let row = CurveRow {
            iteration: it + 1,
            mean_reward: mean(&t.iter().map(|x| x.reward).collect::<Vec<_>>()),
            mean_goodput: mean(&t.iter().map(|x| x.metrics.goodput_mb).collect::<Vec<_>>()),
            mean_drop_ratio: mean(&t.iter().map(|x| x.metrics.drop_ratio).collect::<Vec<_>>()),
            mean_avg_delay: mean(&t.iter().map(|x| x.metrics.avg_delay_ms).collect::<Vec<_>>()),
            loss_policy: stats.loss_policy,
            loss_value: stats.loss_value,
        };
        progress(&row);
        // the rollout measured the parameters before this update
        if !warm && best.as_ref().is_none_or(|(r, _, _)| row.mean_reward > *r) {
            best = Some((row.mean_reward, it + 1, pre_update));
        }
        curve.push(row);
    }
    let (best_iteration, best_agent) = match best {
        Some((_, i, a)) => (i, a),
        None => (config.iterations, agent.clone()),
    };
    Ok(TrainOutput { final_agent: agent, best_agent, best_iteration, curve })
}
