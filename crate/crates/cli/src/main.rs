//! `routelab`: scenario generation, training, evaluation, inference
//! benchmarks and full experiments from the command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use routelab_core::env::EnvKind;
use routelab_core::harness::{bench_csv, bench_inference, evaluate, run_experiment, Approach, BenchConfig, EvalConfig, ExperimentConfig};
use routelab_core::policy::{Agent, AgentConfig, AgentKind, Baseline, BaselineKind, GreedyAgent, RoutingPolicy};
use routelab_core::rl::{train, Objective, TrainConfig};
use routelab_core::scenario::{generate_scenario, ScenarioConfig};
use routelab_core::sim::SimConfig;
use routelab_core::{Error, Preset, Result};

#[derive(Parser)]
#[command(name = "routelab", version, about = "Packet-level routing optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenarios as canonical JSON.
    GenerateScenario(GenerateArgs),
    /// Train a learned routing policy with PPO.
    Train(TrainArgs),
    /// Evaluate baselines and checkpoints on paired scenarios.
    Evaluate(EvaluateArgs),
    /// Measure per-step inference time and APSP calls across sizes.
    Bench(BenchArgs),
    /// Run a full experiment from a TOML or JSON config.
    Run(RunArgs),
}

fn parse_m_traffic(s: &str) -> std::result::Result<f64, String> {
    match s {
        "0.25" | "0.75" | "1.5" | "3.0" | "3" => Ok(s.parse().expect("literal float")),
        _ => Err(format!("'{s}' is not one of 0.25, 0.75, 1.5, 3.0")),
    }
}

fn parse_p_tcp(s: &str) -> std::result::Result<f64, String> {
    match s {
        "0" | "0.0" | "0.5" | "1" | "1.0" => Ok(s.parse().expect("literal float")),
        _ => Err(format!("'{s}' is not one of 0, 0.5, 1")),
    }
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "nx-XS")]
    preset: Preset,
    #[arg(long = "m-traffic", default_value = "1.5", value_parser = parse_m_traffic)]
    m_traffic: f64,
    #[arg(long = "p-tcp", default_value = "0.5", value_parser = parse_p_tcp)]
    p_tcp: f64,
    #[arg(long = "link-failures")]
    link_failures: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Number of scenarios; seeds are `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Output file (single scenario) or directory; stdout when absent.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = "fieldlines")]
    agent: AgentKind,
    #[arg(long, default_value = "packet")]
    env: EnvKind,
    #[arg(long, default_value = "r")]
    objective: Objective,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long = "episodes-per-iteration", default_value_t = 16)]
    episodes_per_iteration: usize,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long = "warm-start")]
    warm_start: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = "packet")]
    env: EnvKind,
    /// Episodes; defaults to 100 (30 on nx-L and nx-XL).
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    /// Comma-separated baselines; EIGRP is always included.
    #[arg(long, value_delimiter = ',', default_value = "eigrp,ospf")]
    baselines: Vec<BaselineKind>,
    /// Checkpoint files (or run directories holding `final.json`), one per
    /// training seed of a single approach.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Aggregate only the better half of checkpoint seeds.
    #[arg(long = "best-half")]
    best_half: bool,
    #[arg(long = "node-features")]
    node_features: bool,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated presets.
    #[arg(long = "preset", value_delimiter = ',', default_value = "nx-XS,nx-S,nx-M,nx-L")]
    presets: Vec<Preset>,
    /// Policy: fieldlines, mslim or a baseline name.
    #[arg(long, default_value = "mslim")]
    policy: String,
    /// Checkpoint for a learned policy; random initialization otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long = "m-traffic", default_value = "0.25", value_parser = parse_m_traffic)]
    m_traffic: f64,
    #[arg(long, default_value = "fluid")]
    env: EnvKind,
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long = "dry-run")]
    dry_run: bool,
    #[arg(short = 'o', long = "out", default_value = "routelab-run")]
    out: PathBuf,
}

fn scenario_config(a: &ScenarioArgs, seed: u64) -> ScenarioConfig {
    ScenarioConfig::new(a.preset, seed, a.m_traffic, a.p_tcp).with_failures(a.link_failures)
}

fn sim(horizon: usize, node_features: bool) -> SimConfig {
    SimConfig { horizon_steps: horizon, node_features, ..SimConfig::default() }
}

fn write_or_print(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(name), text)?;
        }
        None => emit(text)?,
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let scenarios = (0..args.count)
        .map(|i| generate_scenario(&scenario_config(&args.scenario, args.scenario.seed + i))?.to_canonical_json())
        .collect::<Result<Vec<_>>>()?;
    match &args.out {
        Some(p) if args.count == 1 && p.extension().is_some_and(|e| e == "json") => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, &scenarios[0])?;
        }
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            for (i, text) in scenarios.iter().enumerate() {
                std::fs::write(dir.join(format!("scenario-{:03}.json", i)), text)?;
            }
        }
        None => {
            for text in &scenarios {
                emit(&format!("{text}\n"))?;
            }
        }
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig {
        env: args.env,
        agent: args.agent,
        preset: args.scenario.preset,
        m_traffic: args.scenario.m_traffic,
        p_tcp: args.scenario.p_tcp,
        link_failures: args.scenario.link_failures,
        objective: args.objective,
        iterations: args.iterations,
        episodes_per_iteration: args.episodes_per_iteration,
        lr: args.lr,
        warm_start_iterations: args.warm_start,
        seed: args.scenario.seed,
        sim: sim(args.horizon, false),
        ..TrainConfig::default()
    };
    if let Some(mb) = args.minibatch {
        config.ppo.minibatch = mb;
    }
    config.validate()?;
    let output = train(&config, |row| {
        eprintln!(
            "iteration {:>4}  reward {:>10.5}  goodput {:>9.4}  loss {:>9.5} / {:>9.5}",
            row.iteration, row.mean_reward, row.mean_goodput, row.loss_policy, row.loss_value
        )
    })?;
    output.write(&args.out)?;
    std::fs::write(args.out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    eprintln!("best iteration {}; wrote {}", output.best_iteration, args.out.display());
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("final.json")
    } else {
        p.to_path_buf()
    }
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let mut approaches: Vec<Approach> = args.baselines.iter().map(|b| Approach::Baseline(*b)).collect();
    if !args.checkpoints.is_empty() {
        let paths: Vec<PathBuf> = args.checkpoints.iter().map(|p| checkpoint_path(p)).collect();
        let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
        approaches.push(Approach::load(args.name.as_deref(), &refs)?);
    }
    let s = &args.scenario;
    let config = EvalConfig {
        episodes: args.episodes.unwrap_or(s.preset.default_eval_episodes()),
        seed: s.seed,
        env: args.env,
        link_failures: s.link_failures,
        best_half: args.best_half,
        sim: sim(args.horizon, args.node_features),
        ..EvalConfig::new(s.preset, s.m_traffic, s.p_tcp)
    };
    let report = evaluate(&approaches, &config)?;
    match &args.out {
        Some(dir) => {
            for p in report.write(dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
        None => emit(&report.summary_csv())?,
    }
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let config = BenchConfig {
        presets: args.presets.clone(),
        episodes: args.episodes,
        m_traffic: args.m_traffic,
        seed: args.seed,
        env: args.env,
        sim: sim(args.horizon, false),
    };
    let mut make: Box<dyn FnMut() -> Result<Box<dyn RoutingPolicy>>> = match args.policy.parse::<AgentKind>() {
        Ok(kind) => {
            let agent = match &args.checkpoint {
                Some(p) => Agent::load(&checkpoint_path(p))?,
                None => Agent::new(AgentConfig::new(kind), args.seed),
            };
            if agent.kind() != kind {
                return Err(Error::config(format!("checkpoint holds a {} policy, not {kind}", agent.kind())));
            }
            Box::new(move || Ok(Box::new(GreedyAgent::new(agent.clone())) as Box<dyn RoutingPolicy>))
        }
        Err(_) => {
            let kind: BaselineKind = args.policy.parse()?;
            Box::new(move || Ok(Box::new(Baseline::new(kind)) as Box<dyn RoutingPolicy>))
        }
    };
    let rows = bench_inference(&mut make, &config)?;
    write_or_print(args.out.as_deref(), "bench.csv", &bench_csv(&rows))
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let outcome = run_experiment(&config, &args.out, args.dry_run, |line| eprintln!("{line}"))?;
    if args.dry_run {
        for (i, stage) in outcome.plan.iter().enumerate() {
            emit(&format!("{}. {}: {}\n", i + 1, stage.name, stage.detail))?;
        }
        return Ok(());
    }
    let manifest = outcome.manifest.expect("manifest of a real run");
    if let Some(f) = manifest.failure() {
        return Err(Error::Runtime(f.error.clone().unwrap_or_default()));
    }
    eprintln!("wrote {}", args.out.join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateScenario(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Run(a) => run_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
