use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use ays_core::analysis::{
    self, explain_q, greedy_episodes, greedy_observations, replay_baseline, sample_rows, window_shares,
};
use ays_core::dynamics::PolicyAction;
use ays_core::env::{EnvConfig, Observability};
use ays_core::harness::{self, load_agent, read_manifest, resume_seed, Agent, RunSpec};
use ays_core::kv::KvMap;
use ays_core::neural::{load_weights, MlpWeights};
use ays_sandbox::{serve as serve_sessions, SessionManager};

use crate::config::{CliError, CliResult, FlagValue, Resolved};
use crate::{Common, EnvFlags, EvaluateArgs, ExportArgs, GridArgs, ServeArgs, ShapArgs, SharesArgs, TrainArgs};

fn workers(c: &Common) -> usize {
    c.workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn resolve(common: &Common, flags: Vec<FlagValue>) -> CliResult<Resolved> {
    Resolved::new(common.config.as_deref(), &common.set, flags)
}

fn echo(kv: &KvMap, digest: &str) {
    print!("{}", kv.render());
    println!("config digest: {digest}");
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut flags = a.env.flags();
    flags.extend([
        ("agent", "run.agent", a.agent.clone()),
        ("name", "run.name", a.name.clone()),
        ("steps", "run.total_steps", a.steps.clone()),
        ("seeds", "run.seeds", a.seeds.clone()),
        ("out", "run.out_dir", a.out.clone()),
        ("checkpoint-every", "run.checkpoint_every", a.checkpoint_every.clone()),
        ("log-every", "run.log_every", a.log_every.clone()),
        ("lr", "agent.lr", a.lr.clone()),
        ("gamma", "agent.gamma", a.gamma.clone()),
        ("batch-size", "agent.batch_size", a.batch_size.clone()),
        ("train-every", "agent.train_every", a.train_every.clone()),
    ]);
    let r = resolve(&a.common, flags)?;
    r.require("run.agent")?;
    let spec = RunSpec::from_kv(&r.kv).map_err(|e| r.explain(e))?;
    let resolved = spec.to_kv();
    r.reject_unknown(|k| resolved.contains(k))?;
    echo(&resolved, &spec.digest());
    let seeds: Vec<String> = spec.seeds.iter().map(u64::to_string).collect();
    if a.common.dry_run {
        println!(
            "plan: {} {} seed(s) [{}] for {} steps each into {}",
            if a.resume { "resume" } else { "train" },
            spec.agent,
            seeds.join(","),
            spec.total_steps,
            spec.run_dir().display()
        );
        return Ok(());
    }
    let artifacts = if a.resume {
        spec.seeds
            .iter()
            .map(|&s| resume_seed(&spec, s))
            .collect::<ays_core::Result<Vec<_>>>()?
    } else {
        harness::train(&spec, workers(&a.common))?.seeds
    };
    for s in &artifacts {
        let n = s.returns.len();
        let tail = &s.returns[n - (n / 10).max(1).min(n)..];
        let tail_mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        println!(
            "seed {}: {} steps, {} episodes, last-decile mean return {:.3}, final checkpoint {}",
            s.seed,
            s.steps,
            n,
            tail_mean,
            s.final_checkpoint().display()
        );
    }
    Ok(())
}

/// Analysis inputs shared by the checkpoint-reading commands.
struct Setup {
    resolved: Resolved,
    env: EnvConfig,
    nets: Vec<MlpWeights>,
    ckpts: Vec<PathBuf>,
}

/// Environment keys recorded next to a checkpoint, if it came from a run.
fn manifest_env(ckpt: &Path) -> KvMap {
    let mut base = KvMap::new();
    if let Some(dir) = ckpt.parent() {
        if let Ok((spec, _)) = read_manifest(dir) {
            let env = spec.env.to_kv();
            for (k, v) in env.iter().filter(|(k, _)| *k != "env.seed") {
                base.set(k, v);
            }
        }
    }
    base
}

fn setup(
    common: &Common,
    env_flags: &EnvFlags,
    ckpts: Vec<String>,
    extra: Vec<FlagValue>,
    analysis_keys: &[&str],
) -> CliResult<Setup> {
    let mut flags = env_flags.flags();
    let joined = (!ckpts.is_empty()).then(|| ckpts.join(","));
    flags.push(("ckpt", "analysis.ckpt", joined));
    flags.extend(extra);
    let r = resolve(common, flags)?;
    let env_keys = EnvConfig::default().to_kv();
    r.reject_unknown(|k| {
        (env_keys.contains(k) && k != "env.seed") || k == "analysis.ckpt" || analysis_keys.contains(&k)
    })?;
    let ckpts: Vec<PathBuf> = r
        .require("analysis.ckpt")?
        .split(',')
        .map(|s| PathBuf::from(s.trim()))
        .collect();
    let mut nets = Vec::new();
    for p in &ckpts {
        if !p.is_file() {
            return Err(CliError::Validation(format!(
                "invalid value for --ckpt: no file `{}`",
                p.display()
            )));
        }
        nets.push(load_weights(p)?);
    }
    let r = r.with_base(&manifest_env(&ckpts[0]));
    let mut env = EnvConfig::from_kv(&r.kv).map_err(|e| r.explain(e))?;
    if r.kv.get("env.observability").is_none() {
        if let Some(obs) = Observability::from_dim(nets[0].spec().input_dim) {
            env.observability = obs;
        }
    }
    for (net, p) in nets.iter().zip(&ckpts) {
        analysis::check_compatible(net, &env).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
    }
    Ok(Setup {
        resolved: r,
        env,
        nets,
        ckpts,
    })
}

impl Setup {
    /// Fully resolved key set: environment plus the command's settings.
    fn echo(&self, settings: &[(&str, String)]) -> String {
        let mut kv = self.env.to_kv();
        kv.remove("env.seed");
        kv.set(
            "analysis.ckpt",
            self.ckpts
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        for (k, v) in settings {
            kv.set(*k, v);
        }
        let digest = kv.digest();
        echo(&kv, &digest);
        digest
    }
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let s = setup(
        &a.common,
        &a.env,
        a.ckpt.ckpt.into_iter().collect(),
        vec![
            ("episodes", "analysis.episodes", a.episodes),
            ("seeds", "analysis.seeds", a.seeds),
        ],
        &["analysis.episodes", "analysis.seeds"],
    )?;
    let r = &s.resolved;
    let episodes: usize = r.get("analysis.episodes", 100)?;
    let seeds = harness::parse_seeds(&r.get("analysis.seeds", "0,1,2".to_string())?)
        .map_err(|e| CliError::Validation(e.to_string().replace("`run.seeds`", "--seeds")))?;
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    s.echo(&[
        ("analysis.episodes", episodes.to_string()),
        ("analysis.seeds", seed_list.join(",")),
    ]);
    if a.common.dry_run {
        println!("plan: {episodes} greedy episodes for each of {} seed(s)", seeds.len());
        return Ok(());
    }
    let mut rates = Vec::new();
    for seed in seeds {
        let stats = harness::evaluate(&s.nets[0], &s.env, episodes, seed)?;
        rates.push(stats.success_rate);
        println!("seed {seed}: {}", serde_json::to_string(&stats).map_err(runtime)?);
    }
    println!(
        "mean success rate: {:.4}",
        rates.iter().sum::<f64>() / rates.len() as f64
    );
    Ok(())
}

pub fn grid(a: GridArgs) -> CliResult<()> {
    let s = setup(
        &a.common,
        &a.env,
        a.ckpt,
        vec![
            ("resolution", "analysis.resolution", a.resolution),
            ("episodes", "analysis.episodes", a.episodes),
            ("out", "analysis.out", a.out),
        ],
        &["analysis.resolution", "analysis.episodes", "analysis.out"],
    )?;
    let r = &s.resolved;
    let resolution: usize = r.get("analysis.resolution", 11)?;
    if resolution < 2 {
        return Err(CliError::Validation(
            "invalid value for --resolution: must be at least 2".into(),
        ));
    }
    let episodes: usize = r.get("analysis.episodes", 1)?;
    if episodes == 0 {
        return Err(CliError::Validation(
            "invalid value for --episodes: must be at least 1".into(),
        ));
    }
    let out = PathBuf::from(r.get("analysis.out", "grid.csv".to_string())?);
    let digest = s.echo(&[
        ("analysis.resolution", resolution.to_string()),
        ("analysis.episodes", episodes.to_string()),
        ("analysis.out", out.display().to_string()),
    ]);
    if a.common.dry_run {
        println!(
            "plan: {resolution}x{resolution} grid over {} checkpoint(s) into {}",
            s.nets.len(),
            out.display()
        );
        return Ok(());
    }
    let g = analysis::success_grid(&s.nets, &s.env, resolution, episodes, workers(&a.common))?;
    write_output(&out, &g.to_csv(&digest))?;
    for q in analysis::Quadrant::ALL {
        println!("quadrant {q}: {:.3}", g.quadrant_mean(q));
    }
    println!("mean success {:.3}; wrote {}", g.mean(), out.display());
    Ok(())
}

pub fn shares(a: SharesArgs) -> CliResult<()> {
    let s = setup(
        &a.common,
        &a.env,
        a.ckpt.ckpt.into_iter().collect(),
        vec![
            ("episodes", "analysis.episodes", a.episodes),
            ("seed", "analysis.seed", a.seed),
            ("successful-only", "analysis.successful_only", a.successful_only),
            ("out", "analysis.out", a.out),
        ],
        &[
            "analysis.episodes",
            "analysis.seed",
            "analysis.successful_only",
            "analysis.out",
        ],
    )?;
    let r = &s.resolved;
    let episodes: usize = r.get("analysis.episodes", 100)?;
    let seed: u64 = r.get("analysis.seed", 0)?;
    let successful_only: bool = r.get("analysis.successful_only", true)?;
    let out = PathBuf::from(r.get("analysis.out", "shares.csv".to_string())?);
    let digest = s.echo(&[
        ("analysis.episodes", episodes.to_string()),
        ("analysis.seed", seed.to_string()),
        ("analysis.successful_only", successful_only.to_string()),
        ("analysis.out", out.display().to_string()),
    ]);
    if a.common.dry_run {
        println!(
            "plan: share curve over {episodes} greedy episodes into {}",
            out.display()
        );
        return Ok(());
    }
    let eps = greedy_episodes(&s.nets[0], &s.env, episodes, seed)?;
    let kept: Vec<_> = eps
        .iter()
        .filter(|e| !successful_only || e.cause == ays_core::env::TerminalCause::Green)
        .collect();
    if kept.is_empty() {
        return Err(CliError::Runtime(format!("none of the {episodes} episodes qualifies")));
    }
    let curve = analysis::share_curve_from_episodes(kept.iter().copied());
    write_output(&out, &curve.to_csv(&digest))?;
    for (label, range) in [("1-25", 1..=25), ("50-100", 50..=100)] {
        if let Some(w) = window_shares(kept.iter().copied(), range) {
            let parts: Vec<String> = PolicyAction::ALL
                .iter()
                .map(|act| format!("{} {:.3}", act.label(), w[act.index()]))
                .collect();
            println!("steps {label}: {}", parts.join(", "));
        }
    }
    println!("{} episode(s) kept; wrote {}", kept.len(), out.display());
    Ok(())
}

pub fn shap(a: ShapArgs) -> CliResult<()> {
    let s = setup(
        &a.common,
        &a.env,
        a.ckpt.ckpt.into_iter().collect(),
        vec![
            ("baseline", "analysis.baseline", a.baseline),
            ("baseline-size", "analysis.baseline_size", a.baseline_size),
            ("states", "analysis.states", a.states),
            ("seed", "analysis.seed", a.seed),
            ("out", "analysis.out", a.out),
        ],
        &[
            "analysis.baseline",
            "analysis.baseline_size",
            "analysis.states",
            "analysis.seed",
            "analysis.out",
        ],
    )?;
    let r = &s.resolved;
    let source = r.get("analysis.baseline", "replay".to_string())?;
    if source != "replay" && source != "episodes" {
        return Err(CliError::Validation(format!(
            "invalid value for --baseline: expected replay or episodes, got `{source}`"
        )));
    }
    let baseline_size: usize = r.get("analysis.baseline_size", 500)?;
    let states: usize = r.get("analysis.states", 200)?;
    let seed: u64 = r.get("analysis.seed", 0)?;
    let out = PathBuf::from(r.get("analysis.out", "shap.csv".to_string())?);
    let digest = s.echo(&[
        ("analysis.baseline", source.clone()),
        ("analysis.baseline_size", baseline_size.to_string()),
        ("analysis.states", states.to_string()),
        ("analysis.seed", seed.to_string()),
        ("analysis.out", out.display().to_string()),
    ]);
    if a.common.dry_run {
        println!(
            "plan: explain {states} {source} states against {baseline_size} baseline states into {}",
            out.display()
        );
        return Ok(());
    }
    let net = &s.nets[0];
    let dim = net.spec().input_dim;
    let (baseline, explained) = if source == "replay" {
        let dir = s.ckpts[0].parent().unwrap_or(Path::new("."));
        let (spec, run_seed) = read_manifest(dir)?;
        match load_agent(&spec, run_seed, dir)? {
            Agent::Dqn(agent) => (
                replay_baseline(agent.replay_storage(), baseline_size, seed)?,
                replay_baseline(agent.replay_storage(), states, seed.wrapping_add(1))?,
            ),
            Agent::ActorCritic(_) => {
                return Err(CliError::Validation(
                    "--baseline replay needs a value-based run; use --baseline episodes".into(),
                ))
            }
        }
    } else {
        let rows = greedy_observations(net, &s.env, 20, seed)?;
        (
            sample_rows(&rows, dim, baseline_size, seed)?,
            sample_rows(&rows, dim, states, seed.wrapping_add(1))?,
        )
    };
    let report = explain_q(net, &explained, &baseline)?;
    write_output(&out, &report.to_csv(&digest))?;
    for (i, name) in report.features.iter().enumerate() {
        println!("mean |phi| {name}: {:.6}", report.mean_abs(&[i]));
    }
    println!("{} state(s) explained; wrote {}", report.rows.len(), out.display());
    Ok(())
}

pub fn export_traj(a: ExportArgs) -> CliResult<()> {
    let s = setup(
        &a.common,
        &a.env,
        a.ckpt.ckpt.into_iter().collect(),
        vec![
            ("episodes", "analysis.episodes", a.episodes),
            ("seed", "analysis.seed", a.seed),
            ("out", "analysis.out", a.out),
            ("trace", "analysis.trace", a.trace),
        ],
        &["analysis.episodes", "analysis.seed", "analysis.out", "analysis.trace"],
    )?;
    let r = &s.resolved;
    let episodes: usize = r.get("analysis.episodes", 10)?;
    let seed: u64 = r.get("analysis.seed", 0)?;
    let out = PathBuf::from(r.get("analysis.out", "trajectories.jsonl".to_string())?);
    let trace = r.kv.get("analysis.trace").map(PathBuf::from);
    let mut settings = vec![
        ("analysis.episodes", episodes.to_string()),
        ("analysis.seed", seed.to_string()),
        ("analysis.out", out.display().to_string()),
    ];
    if let Some(t) = &trace {
        settings.push(("analysis.trace", t.display().to_string()));
    }
    let digest = s.echo(&settings);
    if a.common.dry_run {
        println!("plan: export {episodes} greedy episodes into {}", out.display());
        return Ok(());
    }
    let eps = analysis::export_trajectories(&s.nets[0], &s.env, episodes, seed, &out, &digest)?;
    println!("wrote {} episode(s) to {}", eps.len(), out.display());
    if let Some(t) = trace {
        let rows = analysis::reward_per_action_trace(&s.nets[0], &s.env, seed)?;
        write_output(&t, &analysis::trace_to_csv(&rows, &digest))?;
        println!("wrote reward trace to {}", t.display());
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> CliResult<()> {
    let flags = vec![
        ("host", "serve.host", a.host),
        ("port", "serve.port", a.port),
        ("checkpoint-dir", "serve.checkpoint_dir", a.checkpoint_dir),
        ("ttl-secs", "serve.ttl_secs", a.ttl_secs),
    ];
    let r = resolve(&a.common, flags)?;
    r.reject_unknown(|k| k.starts_with("serve.") && ["host", "port", "checkpoint_dir", "ttl_secs"].contains(&&k[6..]))?;
    let host: std::net::IpAddr = r.get("serve.host", std::net::IpAddr::from([127, 0, 0, 1]))?;
    let port: u16 = r.get("serve.port", 8765)?;
    let ttl: u64 = r.get("serve.ttl_secs", 1800)?;
    let dir = r.kv.get("serve.checkpoint_dir").map(PathBuf::from);
    if let Some(d) = &dir {
        if !d.is_dir() {
            return Err(CliError::Validation(format!(
                "invalid value for --checkpoint-dir: `{}` is not a directory",
                d.display()
            )));
        }
    }
    let mut kv = KvMap::new();
    kv.set("serve.host", host);
    kv.set("serve.port", port);
    kv.set("serve.ttl_secs", ttl);
    if let Some(d) = &dir {
        kv.set("serve.checkpoint_dir", d.display());
    }
    echo(&kv, &kv.digest());
    if a.common.dry_run {
        println!("plan: serve on {host}:{port}");
        return Ok(());
    }
    let manager = Arc::new(SessionManager::new(Duration::from_secs(ttl), dir));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(workers(&a.common))
        .enable_all()
        .build()
        .map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await.map_err(runtime)?;
        println!("listening on {}", listener.local_addr().map_err(runtime)?);
        serve_sessions(listener, manager).await.map_err(runtime)
    })
}
