mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ays_core::agents::AgentKind;
use ays_core::analysis::{
    explain_q, greedy_episodes, replay_baseline, shapley_values, share_curve_from_episodes, success_grid, window_shares,
};
use ays_core::dynamics::{
    denormalize, derivatives, fixed_points, integrate, normalize, ModelParams, NormState, PolicyAction, RawState,
};
use ays_core::env::{self, EnvConfig, Observability, RewardKind, TerminalCause, REFERENCE};
use ays_core::harness::{
    checkpoint_path, evaluate_checkpoint, load_agent, read_manifest, read_metrics, resume_seed, train_seed, Agent,
    MetricRecord, RunSpec,
};
use ays_core::neural::{load_weights, MlpWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_STEPS: u64 = 200_000;
const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_EPISODES: usize = 100;
const EVAL_SEED: u64 = 10_000;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        if pass {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn cache_dir() -> PathBuf {
    std::env::var_os("AYS_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

struct SeedRun {
    seed: u64,
    returns: Vec<f64>,
    checkpoint: PathBuf,
}

struct Run {
    spec: RunSpec,
    seeds: Vec<SeedRun>,
}

impl Run {
    fn nets(&self) -> Vec<MlpWeights> {
        self.seeds
            .iter()
            .map(|s| load_weights(&s.checkpoint).unwrap())
            .collect()
    }
}

fn returns_of(dir: &Path) -> Vec<f64> {
    let (_, records) = read_metrics(&dir.join("metrics.jsonl")).unwrap();
    records
        .into_iter()
        .filter_map(|r| match r {
            MetricRecord::Episode { episodic_return, .. } => Some(episodic_return),
            _ => None,
        })
        .collect()
}

fn matches_spec(spec: &RunSpec, dir: &Path) -> bool {
    read_manifest(dir).is_ok_and(|(m, _)| m.digest() == spec.digest())
}

fn ensure_seed(spec: &RunSpec, seed: u64) -> SeedRun {
    let dir = spec.seed_dir(seed);
    let checkpoint = checkpoint_path(&dir, spec.total_steps);
    if !(matches_spec(spec, &dir) && checkpoint.exists()) {
        eprintln!("training {} seed {seed} ({} steps)", spec.name, spec.total_steps);
        let resumed = matches_spec(spec, &dir) && dir.join("resume.bin").exists() && resume_seed(spec, seed).is_ok();
        if !resumed {
            train_seed(spec, seed).unwrap();
        }
    }
    SeedRun {
        seed,
        returns: returns_of(&dir),
        checkpoint,
    }
}

fn ensure(name: &str, agent: AgentKind, env: EnvConfig, seeds: &[u64]) -> Run {
    let mut spec = RunSpec::new(name, agent, env);
    spec.total_steps = TRAIN_STEPS;
    spec.seeds = seeds.to_vec();
    spec.out_dir = cache_dir();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(seeds.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let done = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let run = ensure_seed(&spec, seed);
                done.lock().unwrap().push(run);
            });
        }
    });
    let mut seeds = done.into_inner().unwrap();
    seeds.sort_by_key(|s| s.seed);
    Run { spec, seeds }
}

fn decile_means(returns: &[f64]) -> (f64, f64) {
    let d = (returns.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&returns[..d]), mean(&returns[returns.len() - d..]))
}

fn success_rates(run: &Run, env: &EnvConfig) -> Vec<f64> {
    run.seeds
        .iter()
        .map(|s| {
            evaluate_checkpoint(&s.checkpoint, env, EVAL_EPISODES, EVAL_SEED + s.seed)
                .unwrap()
                .success_rate
        })
        .collect()
}

/// Learning-works verdict and a one-line summary for one run.
fn learning_works(run: &Run) -> (bool, String) {
    let rates = success_rates(run, &run.spec.env);
    let mut improved = true;
    let mut parts = Vec::new();
    for (s, rate) in run.seeds.iter().zip(&rates) {
        let (first, last) = decile_means(&s.returns);
        improved &= last > first;
        parts.push(format!(
            "seed {} deciles {first:.1}->{last:.1} success {rate:.2}",
            s.seed
        ));
    }
    let enough = rates.iter().filter(|&&r| r >= 0.5).count() >= 2;
    (improved && enough, format!("{} [{}]", run.spec.name, parts.join("; ")))
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn model_fidelity(report: &mut Report) {
    let params = ModelParams::default();
    let black = fixed_points(&params).black;
    let target = RawState::new(350.0, 4.84e13, 0.0);
    let scale = REFERENCE.to_array();
    let close = rel(black.a, target.a) < 0.005 && rel(black.y, target.y) < 0.005 && black.s.abs() <= 0.005 * scale[2];
    let rates = derivatives(&black, &params).unwrap().to_array();
    let still = rates.iter().zip(&scale).all(|(d, s)| d.abs() < 1e-6 * s);
    report.record(
        "model fidelity",
        close && still,
        format!(
            "black fixed point ({:.3}, {:.4e}, {}), derivatives ({:.2e}, {:.2e}, {:.2e})",
            black.a, black.y, black.s, rates[0], rates[1], rates[2]
        ),
    );
}

fn integrator_order(report: &mut Report) {
    let params = ModelParams::default();
    let s0 = RawState::present_day();
    let path: Vec<RawState> = [1, 2, 4, 8]
        .iter()
        .map(|&n| integrate(&s0, &params, 1.0, n).unwrap())
        .collect();
    let err = |a: &RawState, b: &RawState| {
        a.to_array()
            .iter()
            .zip(b.to_array())
            .map(|(x, y)| rel(*x, y))
            .fold(0.0, f64::max)
    };
    let errors: Vec<f64> = path.windows(2).map(|w| err(&w[0], &w[1])).collect();
    let ratios: Vec<f64> = errors.windows(2).map(|e| e[0] / e[1]).collect();
    let pass = ratios.iter().all(|r| (8.0..=32.0).contains(r));
    report.record(
        "RK4 order",
        pass,
        format!(
            "step-halving error ratios {ratios:.3?} (errors {})",
            errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

fn normalization(report: &mut Report) {
    let half = normalize(&RawState::present_day(), &REFERENCE);
    let exact = half == NormState::new(0.5, 0.5, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let raw = RawState::new(
            rng.random_range(0.0..10.0) * REFERENCE.a,
            rng.random_range(0.0..10.0) * REFERENCE.y,
            rng.random_range(0.0..10.0) * REFERENCE.s,
        );
        let back = denormalize(&normalize(&raw, &REFERENCE), &REFERENCE).unwrap();
        for (x, y) in raw.to_array().iter().zip(back.to_array()) {
            worst = worst.max(rel(*x, y));
        }
    }
    report.record(
        "normalization",
        exact && worst < 1e-12,
        format!("normalize(s0) = {half:?}, max round-trip relative error {worst:.2e} over 10000 states"),
    );
}

fn business_as_usual(report: &mut Report) {
    let config = EnvConfig::default();
    let start = normalize(&RawState::present_day(), &REFERENCE);
    let (state, obs) = env::reset_to_norm(&config, start, &mut env::episode_rng(&config, 0));
    let episode = env::rollout(&config, state, obs, |_| PolicyAction::Noop).unwrap();
    let last = episode.records.last().unwrap();
    report.record(
        "business-as-usual collapse",
        episode.cause == TerminalCause::Boundary,
        format!(
            "NOOP from s0 ends with {} after {} years at a = {:.1} GtC",
            episode.cause.as_str(),
            episode.len(),
            last.raw_a
        ),
    );
}

fn gradient_suite(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for head in common::HEADS {
        let e = common::max_error_over(head, 20, &mut rng);
        worst = worst.max(e);
        parts.push(format!("{} {e:.2e}", head.as_str()));
    }
    report.record(
        "gradient suite",
        worst < 1e-4,
        format!("max relative error over 20 nets per head: {}", parts.join(", ")),
    );
}

fn prioritized_replay(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let priorities = common::random_priorities(&mut rng);
        worst = worst.max(common::per_max_sigma(&priorities, 0.6, 100_000, &mut rng));
    }
    report.record(
        "prioritized replay",
        worst <= 4.0,
        format!("max deviation {worst:.2} sigma over 5 priority vectors, 1e5 draws each"),
    );
}

fn no_secondary(report: &mut Report) {
    let manifest = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("Cargo.toml")).unwrap();
    let independent = !manifest.contains("ays-sandbox") && !manifest.contains("ays-cli");
    report.record(
        "no secondary component",
        independent,
        "this suite builds only ays-core, which has no dependency on the sandbox or CLI crates".into(),
    );
}

fn early_action(report: &mut Report, dqn: &Run) {
    let mut successful = Vec::new();
    for (s, net) in dqn.seeds.iter().zip(dqn.nets()) {
        for ep in greedy_episodes(&net, &dqn.spec.env, EVAL_EPISODES, EVAL_SEED + s.seed).unwrap() {
            if ep.cause == TerminalCause::Green {
                successful.push(ep);
            }
        }
    }
    if successful.is_empty() {
        report.record("early action", false, "no successful evaluation episodes".into());
        return;
    }
    let curve = share_curve_from_episodes(&successful);
    let at = |a| curve.share_at(49, a).unwrap_or(f64::NAN);
    let (et_dg, et) = (
        at(PolicyAction::EnergyTransitionDeGrowth),
        at(PolicyAction::EnergyTransition),
    );
    let early =
        window_shares(&successful, 1..=25).map_or(f64::NAN, |w| w[PolicyAction::EnergyTransitionDeGrowth.index()]);
    let late =
        window_shares(&successful, 50..=100).map_or(f64::NAN, |w| w[PolicyAction::EnergyTransitionDeGrowth.index()]);
    let pass = (et_dg - 0.75).abs() <= 0.15 && (et - 0.25).abs() <= 0.15 && early > late;
    report.record(
        "early action",
        pass,
        format!(
            "{} successful episodes; shares at t=50 ET_DG {et_dg:.3} ET {et:.3}; ET_DG over steps 1-25 {early:.3}, 50-100 {late:.3}",
            successful.len()
        ),
    );
}

fn initialization_asymmetry(report: &mut Report, dqn: &Run) {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let grid = success_grid(&dqn.nets(), &dqn.spec.env, 11, 1, workers).unwrap();
    let best = grid.best_quadrant();
    let (hi, lo) = (grid.quadrant_mean(best), grid.quadrant_mean(best.opposite()));
    report.record(
        "initialization asymmetry",
        hi >= 0.8 && lo <= 0.2,
        format!(
            "best quadrant {best} mean {hi:.3}, opposite {} mean {lo:.3}, grid mean {:.3}",
            best.opposite(),
            grid.mean()
        ),
    );
}

fn sparse_degradation(report: &mut Report, pb: &Run, sparse: &Run) {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let pb_rate = mean(success_rates(pb, &pb.spec.env));
    let sparse_rate = mean(success_rates(sparse, &sparse.spec.env));
    report.record(
        "sparse-reward degradation",
        sparse_rate <= pb_rate,
        format!("mean greedy success sparse {sparse_rate:.3}, PB {pb_rate:.3}"),
    );
}

fn shapley(report: &mut Report, markov: &Run) {
    let w = [2.0, -1.0, 0.5, 3.0];
    let x = [0.3, 0.9, -0.4, 0.2];
    let base = [0.0, 0.1, 0.2, 0.3, 1.0, -1.0, 0.5, 0.7];
    let additive = |rows: &[f64]| -> Vec<f64> {
        rows.chunks_exact(4)
            .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0)
            .collect()
    };
    let (phi, _, _) = shapley_values(additive, &x, &base).unwrap();
    let closed = (0..4)
        .map(|i| (phi[i] - w[i] * (x[i] - (base[i] + base[4 + i]) / 2.0)).abs())
        .fold(0.0, f64::max);
    let dummy_f = |rows: &[f64]| -> Vec<f64> { rows.chunks_exact(4).map(|r| r[0] * r[1] + r[3].exp()).collect() };
    let (dummy, _, _) = shapley_values(dummy_f, &x, &base).unwrap();

    let run = &markov.seeds[0];
    let net = load_weights(&run.checkpoint).unwrap();
    let Agent::Dqn(agent) = load_agent(&markov.spec, run.seed, &markov.spec.seed_dir(run.seed)).unwrap() else {
        panic!("value-based run")
    };
    let baseline = replay_baseline(agent.replay_storage(), 500, 0).unwrap();
    let states = replay_baseline(agent.replay_storage(), 200, 1).unwrap();
    let r = explain_q(&net, &states, &baseline).unwrap();
    let efficiency = r
        .rows
        .iter()
        .map(|row| (row.phi.iter().sum::<f64>() - (row.value - row.base)).abs())
        .fold(0.0, f64::max);
    let (level, velocity) = (r.mean_abs(&[0, 1, 2]), r.mean_abs(&[3, 4, 5]));
    let pass = efficiency < 1e-9 && closed < 1e-9 && dummy[2] == 0.0 && velocity > level;
    report.record(
        "Shapley",
        pass,
        format!(
            "efficiency {efficiency:.2e}, closed form {closed:.2e}, dummy {}, Markov D3QN mean |phi| velocity {velocity:.4} vs level {level:.4}",
            dummy[2]
        ),
    );
}

fn main() -> ExitCode {
    let mut report = Report { passed: 0, failed: 0 };
    model_fidelity(&mut report);
    integrator_order(&mut report);
    normalization(&mut report);
    business_as_usual(&mut report);
    gradient_suite(&mut report);
    prioritized_replay(&mut report);

    let pb = EnvConfig::default();
    let dqn = ensure("dqn-pb", AgentKind::Dqn, pb.clone(), &SEEDS);
    let d3qn = ensure("d3qn-pb", AgentKind::D3qn, pb.clone(), &SEEDS);
    let (dqn_ok, dqn_detail) = learning_works(&dqn);
    let (d3qn_ok, d3qn_detail) = learning_works(&d3qn);
    report.record(
        "learning works",
        dqn_ok && d3qn_ok,
        format!("{dqn_detail} | {d3qn_detail}"),
    );
    early_action(&mut report, &dqn);
    initialization_asymmetry(&mut report, &dqn);

    let sparse = ensure(
        "dqn-sparse",
        AgentKind::Dqn,
        pb.clone().with_reward(RewardKind::Sparse),
        &SEEDS,
    );
    sparse_degradation(&mut report, &dqn, &sparse);

    let noisy = ensure("dqn-noise", AgentKind::Dqn, pb.clone().with_noise(1e-3), &SEEDS);
    let (ok, detail) = learning_works(&noisy);
    report.record("noisy robustness", ok, detail);

    let markov = ensure(
        "d3qn-markov",
        AgentKind::D3qn,
        pb.with_observability(Observability::Markov),
        &SEEDS[..1],
    );
    shapley(&mut report, &markov);
    no_secondary(&mut report);

    println!("{} passed, {} failed", report.passed, report.failed);
    if report.failed > 0 && std::env::var_os("AYS_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
