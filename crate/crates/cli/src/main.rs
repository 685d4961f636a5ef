mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CliError, FlagValue};

#[derive(Debug, Parser)]
#[command(
    name = "ays",
    version,
    about = "Train, evaluate and analyse agents on the AYS climate-economy model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent over several seeds.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Success rate over a grid of initial states.
    Grid(GridArgs),
    /// Cumulative action shares over time.
    Shares(SharesArgs),
    /// Exact Shapley attribution of the greedy action's value.
    Shap(ShapArgs),
    /// Greedy trajectories as JSON lines, plus a per-step reward trace.
    ExportTraj(ExportArgs),
    /// Run the interactive session server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Key/value configuration file (`key = value` per line).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set any configuration key; repeatable. Named flags take precedence.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Validate and print the resolved plan without writing anything.
    #[arg(long)]
    dry_run: bool,
    /// Parallel seeds or grid cells [default: available cores].
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct EnvFlags {
    /// Reward function: pb, pc or sparse (env.reward) [default: pb].
    #[arg(long)]
    reward: Option<String>,
    /// Observation: partial or markov (env.observability) [default: partial].
    #[arg(long)]
    observability: Option<String>,
    /// Relative std of per-episode parameter noise (env.param_noise_std) [default: 0].
    #[arg(long)]
    noise: Option<String>,
}

impl EnvFlags {
    fn flags(&self) -> Vec<FlagValue> {
        vec![
            ("reward", "env.reward", self.reward.clone()),
            ("observability", "env.observability", self.observability.clone()),
            ("noise", "env.param_noise_std", self.noise.clone()),
        ]
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    env: EnvFlags,
    /// Agent: dqn, d3qn, a2c or ppo (run.agent).
    #[arg(long)]
    agent: Option<String>,
    /// Run name, the directory under --out (run.name) [default: run].
    #[arg(long)]
    name: Option<String>,
    /// Environment steps per seed (run.total_steps) [default: 500000].
    #[arg(long)]
    steps: Option<String>,
    /// Comma-separated seeds (run.seeds) [default: 0,1,2].
    #[arg(long)]
    seeds: Option<String>,
    /// Output root (run.out_dir) [default: runs].
    #[arg(long)]
    out: Option<String>,
    /// Checkpoint period in steps (run.checkpoint_every) [default: 100000].
    #[arg(long)]
    checkpoint_every: Option<String>,
    /// Loss logging period in steps (run.log_every) [default: 1000].
    #[arg(long)]
    log_every: Option<String>,
    /// Adam learning rate (agent.lr) [default: 0.001].
    #[arg(long)]
    lr: Option<String>,
    /// Discount factor (agent.gamma) [default: 0.99].
    #[arg(long)]
    gamma: Option<String>,
    /// Minibatch size, value-based agents (agent.batch_size) [default: 128].
    #[arg(long)]
    batch_size: Option<String>,
    /// Environment steps per update, value-based agents (agent.train_every) [default: 1].
    #[arg(long)]
    train_every: Option<String>,
    /// Continue each seed from its latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct CkptFlags {
    /// Checkpoint file (analysis.ckpt).
    #[arg(long, value_name = "FILE")]
    ckpt: Option<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    env: EnvFlags,
    #[command(flatten)]
    ckpt: CkptFlags,
    /// Episodes per seed (analysis.episodes) [default: 100].
    #[arg(long)]
    episodes: Option<String>,
    /// Comma-separated evaluation seeds (analysis.seeds) [default: 0,1,2].
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    env: EnvFlags,
    /// Checkpoint files, comma-separated or repeated; cells average over them (analysis.ckpt).
    #[arg(long, value_name = "FILE", value_delimiter = ',')]
    ckpt: Vec<String>,
    /// Points per axis (analysis.resolution) [default: 11].
    #[arg(long)]
    resolution: Option<String>,
    /// Episodes per cell and checkpoint (analysis.episodes) [default: 1].
    #[arg(long)]
    episodes: Option<String>,
    /// Output CSV (analysis.out) [default: grid.csv].
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
struct SharesArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    env: EnvFlags,
    #[command(flatten)]
    ckpt: CkptFlags,
    /// Episodes to roll out (analysis.episodes) [default: 100].
    #[arg(long)]
    episodes: Option<String>,
    /// Evaluation seed (analysis.seed) [default: 0].
    #[arg(long)]
    seed: Option<String>,
    /// Keep only episodes that reach the green state (analysis.successful_only) [default: true].
    #[arg(long)]
    successful_only: Option<String>,
    /// Output CSV (analysis.out) [default: shares.csv].
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
struct ShapArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    env: EnvFlags,
    #[command(flatten)]
    ckpt: CkptFlags,
    /// Baseline source: replay (the run's replay memory) or episodes (greedy rollouts) (analysis.baseline) [default: replay].
    #[arg(long)]
    baseline: Option<String>,
    /// Baseline states (analysis.baseline_size) [default: 500].
    #[arg(long)]
    baseline_size: Option<String>,
    /// States to explain, drawn from the same source (analysis.states) [default: 200].
    #[arg(long)]
    states: Option<String>,
    /// Sampling seed (analysis.seed) [default: 0].
    #[arg(long)]
    seed: Option<String>,
    /// Output CSV (analysis.out) [default: shap.csv].
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    env: EnvFlags,
    #[command(flatten)]
    ckpt: CkptFlags,
    /// Episodes to export (analysis.episodes) [default: 10].
    #[arg(long)]
    episodes: Option<String>,
    /// Evaluation seed (analysis.seed) [default: 0].
    #[arg(long)]
    seed: Option<String>,
    /// Output JSON lines (analysis.out) [default: trajectories.jsonl].
    #[arg(long)]
    out: Option<String>,
    /// Also write the reward trace of episode 0 to this CSV (analysis.trace).
    #[arg(long)]
    trace: Option<String>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    /// Bind address (serve.host) [default: 127.0.0.1].
    #[arg(long)]
    host: Option<String>,
    /// Port (serve.port) [default: 8765].
    #[arg(long)]
    port: Option<String>,
    /// Directory searched for .aysw checkpoints (serve.checkpoint_dir).
    #[arg(long)]
    checkpoint_dir: Option<String>,
    /// Idle session lifetime in seconds (serve.ttl_secs) [default: 1800].
    #[arg(long)]
    ttl_secs: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Grid(a) => commands::grid(a),
        Command::Shares(a) => commands::shares(a),
        Command::Shap(a) => commands::shap(a),
        Command::ExportTraj(a) => commands::export_traj(a),
        Command::Serve(a) => commands::serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
