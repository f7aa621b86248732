use std::path::Path;
use std::process::{Command, Output};

fn routelab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_routelab")).args(args).current_dir(cwd).output().expect("spawn routelab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn generate_scenario_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate-scenario", "--seed", "11", "--preset", "nx-S", "--m-traffic", "3.0", "--p-tcp", "1", "--link-failures"];
    let a = routelab(&args, dir.path());
    let b = routelab(&args, dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
    let c = routelab(&["generate-scenario", "--seed", "12", "--preset", "nx-S"], dir.path());
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn generate_scenario_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = routelab(&["generate-scenario", "--count", "3", "-o", "sc"], dir.path());
    assert_eq!(code(&out), 0);
    for i in 0..3 {
        assert!(dir.path().join(format!("sc/scenario-{i:03}.json")).exists());
    }
    let out = routelab(&["generate-scenario", "-o", "one.json"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("one.json").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["generate-scenario", "--m-traffic", "2.0"],
        vec!["generate-scenario", "--p-tcp", "0.3"],
        vec!["generate-scenario", "--preset", "nx-Q"],
        vec!["train", "--objective", "x", "-o", "t"],
        vec!["train", "--env", "hybrid", "-o", "t"],
        vec!["train", "--agent", "mslim", "--warm-start", "2", "-o", "t"],
        vec!["train", "--minibatch", "7", "-o", "t"],
        vec!["evaluate", "--baselines", "rip"],
        vec!["frobnicate"],
    ] {
        let out = routelab(&args, dir.path());
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.json"), "{not json").unwrap();
    let out = routelab(&["evaluate", "--checkpoint", "broken.json", "--episodes", "1"], dir.path());
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.json"));
}

#[test]
fn evaluate_is_deterministic_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let args = |o: &'static str| {
        vec!["evaluate", "--seed", "5", "--episodes", "3", "--horizon", "20", "--baselines", "eigrp,ospf,random-lw", "-o", o]
    };
    assert_eq!(code(&routelab(&args("a"), dir.path())), 0);
    assert_eq!(code(&routelab(&args("b"), dir.path())), 0);
    for f in ["report.json", "summary.csv", "episodes.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let summary = std::fs::read_to_string(dir.path().join("a/summary.csv")).unwrap();
    assert!(summary.starts_with("approach,metric,mean,relative,min,max\n"));
    assert!(summary.contains("\nrandom-lw,goodput_mb,"));
    assert!(dir.path().join("a/timing.csv").exists());
}

#[test]
fn train_then_evaluate_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = routelab(
        &[
            "train", "--agent", "mslim", "--env", "fluid", "--iterations", "2", "--episodes-per-iteration", "2",
            "--horizon", "10", "--minibatch", "10", "--seed", "3", "-o", "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["curve.csv", "final.json", "best.json", "config.json"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(dir.path().join("run/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let out = routelab(&["evaluate", "--checkpoint", "run", "--episodes", "2", "--horizon", "10"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\nmslim,goodput_mb,"));
    let out = routelab(&["evaluate", "--checkpoint", "run", "--episodes", "1", "--horizon", "10", "--node-features"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn bench_reports_apsp_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = routelab(&["bench", "--policy", "mslim", "--preset", "nx-XS", "--episodes", "1", "--horizon", "5"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "mslim");
    assert_eq!(&row[6..], ["1", "1"]);
    let out = routelab(&["bench", "--policy", "bgp"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn run_dry_run_and_missing_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = "seed = 1\npreset = \"nx-XS\"\nm_traffic = 0.75\np_tcp = 0.0\nhorizon_steps = 10\n\n\
                  [scenarios]\ncount = 1\n\n[evaluate]\nepisodes = 2\nbaselines = [\"eigrp\"]\n";
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = routelab(&["run", "exp.toml", "--dry-run", "-o", "out"], dir.path());
    assert_eq!(code(&out), 0);
    let plan = String::from_utf8(out.stdout).unwrap();
    assert!(plan.starts_with("1. scenarios:"), "{plan}");
    assert!(plan.contains("2. evaluate:"));
    assert!(!dir.path().join("out").exists());

    let out = routelab(&["run", "exp.toml", "-o", "out"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("scenarios/scenario-000.json"));

    std::fs::write(dir.path().join("bad.toml"), config.replace("m_traffic = 0.75\n", "")).unwrap();
    let out = routelab(&["run", "bad.toml"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("m_traffic"));
}
