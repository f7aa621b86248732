use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use routelab_bench::{graph, scenario};
use routelab_core::env::{make_env, EnvKind};
use routelab_core::graph::{apsp_dijkstra, floyd_warshall, weights_to_action};
use routelab_core::policy::{Agent, AgentConfig, AgentKind, GreedyAgent, RoutingPolicy};
use routelab_core::scenario::{generate_scenario, ScenarioConfig};
use routelab_core::sim::SimConfig;
use routelab_core::util::rng_from_seed;
use routelab_core::Preset;

const SIZES: [Preset; 3] = [Preset::XS, Preset::S, Preset::M];

fn shortest_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("apsp");
    for preset in SIZES {
        let g = graph(preset);
        let w = g.eigrp_weights();
        group.bench_with_input(BenchmarkId::new("floyd_warshall", preset), &g, |b, g| b.iter(|| floyd_warshall(g, black_box(&w))));
        group.bench_with_input(BenchmarkId::new("dijkstra", preset), &g, |b, g| b.iter(|| apsp_dijkstra(g, black_box(&w))));
        group.bench_with_input(BenchmarkId::new("weights_to_action", preset), &g, |b, g| {
            b.iter(|| weights_to_action(g, black_box(&w)))
        });
    }
    group.finish();
}

fn scenario_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_scenario");
    for preset in SIZES {
        let config = ScenarioConfig::new(preset, 3, 1.5, 0.5).with_failures(true);
        group.bench_with_input(BenchmarkId::from_parameter(preset), &config, |b, cfg| b.iter(|| generate_scenario(cfg).unwrap()));
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("episode_eigrp");
    group.sample_size(10);
    let sim = SimConfig { horizon_steps: 20, ..SimConfig::default() };
    for env_kind in [EnvKind::Packet, EnvKind::Fluid] {
        let sc = scenario(Preset::XS, 1.5);
        let g = graph(Preset::XS);
        let action = weights_to_action(&g, &g.eigrp_weights());
        group.bench_function(BenchmarkId::new(env_kind.to_string(), "nx-XS"), |b| {
            b.iter(|| {
                let mut env = make_env(env_kind, &sc, &sim);
                while !env.is_done() {
                    env.begin_step();
                    env.step(&action).unwrap();
                }
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("policy_step");
    group.sample_size(20);
    let sim = SimConfig { horizon_steps: 5, ..SimConfig::default() };
    for kind in [AgentKind::FieldLines, AgentKind::MSlim] {
        for preset in [Preset::XS, Preset::S] {
            let sc = scenario(preset, 0.25);
            let mut policy = GreedyAgent::new(Agent::new(AgentConfig::new(kind), 1));
            let mut env = make_env(EnvKind::Fluid, &sc, &sim);
            let mut rng = rng_from_seed(1);
            policy.reset(env.as_ref());
            env.begin_step();
            let action = policy.act(env.as_ref(), false, &mut rng).unwrap();
            let graph = env.graph();
            let (state, _) = env.step(&action).unwrap();
            policy.observe_outcome(&graph, &state);
            env.begin_step();
            group.bench_function(BenchmarkId::new(kind.to_string(), preset), |b| {
                b.iter(|| policy.act(env.as_ref(), false, &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, shortest_paths, scenario_generation, simulation, inference);
criterion_main!(benches);
