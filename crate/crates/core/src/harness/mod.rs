//! Seeded training runs, metric streams, checkpoints and greedy evaluation.
//!
//! A run writes `<out_dir>/<name>/seed<k>/` containing `metrics.jsonl`,
//! `ckpt_<step>.aysw`, `resume.bin` and `manifest.txt`.

mod eval;
mod metrics;
mod train;

use std::path::{Path, PathBuf};

use crate::agents::{greedy_action, ActorCriticAgent, ActorCriticConfig, AgentKind, DqnAgent, DqnConfig, Transition};
use crate::codec::{Reader, Writer};
use crate::dynamics::PolicyAction;
use crate::env::{episode_seed, EnvConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::neural::MlpWeights;

pub use eval::{evaluate, evaluate_checkpoint, evaluate_policy, moving_average, CauseCounts, EvalStats, MovingAverage};
pub use metrics::{read_metrics, MetricRecord, MetricsHeader, MetricsWriter, METRICS_VERSION};
pub use train::{load_agent, resume_seed, train, train_seed, train_seed_until, RunArtifacts, SeedArtifacts};

#[derive(Debug, Clone, PartialEq)]
pub enum AgentConfig {
    Dqn(DqnConfig),
    ActorCritic(ActorCriticConfig),
}

impl AgentConfig {
    pub fn default_for(kind: AgentKind) -> Self {
        match kind {
            AgentKind::Dqn => AgentConfig::Dqn(DqnConfig::dqn()),
            AgentKind::D3qn => AgentConfig::Dqn(DqnConfig::d3qn()),
            AgentKind::A2c => AgentConfig::ActorCritic(ActorCriticConfig::a2c()),
            AgentKind::Ppo => AgentConfig::ActorCritic(ActorCriticConfig::ppo()),
        }
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        match self {
            AgentConfig::Dqn(c) => c.write_kv(kv),
            AgentConfig::ActorCritic(c) => c.write_kv(kv),
        }
    }

    pub fn read_kv(self, kv: &KvMap) -> Result<Self> {
        Ok(match self {
            AgentConfig::Dqn(c) => AgentConfig::Dqn(c.read_kv(kv)?),
            AgentConfig::ActorCritic(c) => AgentConfig::ActorCritic(c.read_kv(kv)?),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AgentConfig::Dqn(c) => c.validate(),
            AgentConfig::ActorCritic(c) => c.validate(),
        }
    }

    fn matches(&self, kind: AgentKind) -> bool {
        match self {
            AgentConfig::Dqn(c) => match kind {
                AgentKind::Dqn | AgentKind::D3qn => c.head() == kind.head(),
                _ => false,
            },
            AgentConfig::ActorCritic(c) => match kind {
                AgentKind::A2c => c.algorithm == crate::agents::actor_critic::PolicyAlgorithm::A2c,
                AgentKind::Ppo => c.algorithm == crate::agents::actor_critic::PolicyAlgorithm::Ppo,
                _ => false,
            },
        }
    }
}

/// Everything that determines a set of training runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub agent: AgentKind,
    pub env: EnvConfig,
    pub agent_config: AgentConfig,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    /// Environment steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Environment steps between loss records.
    pub log_every: u64,
    pub out_dir: PathBuf,
}

impl RunSpec {
    pub const DEFAULT_STEPS: u64 = 500_000;

    pub fn new(name: impl Into<String>, agent: AgentKind, env: EnvConfig) -> Self {
        Self {
            name: name.into(),
            agent,
            env,
            agent_config: AgentConfig::default_for(agent),
            total_steps: Self::DEFAULT_STEPS,
            seeds: vec![0, 1, 2],
            checkpoint_every: 100_000,
            log_every: 1000,
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("run.name", "must be a non-empty path component"));
        }
        if self.total_steps < 1 {
            return Err(Error::config("run.total_steps", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("run.seeds", "must list at least one seed"));
        }
        if self.log_every < 1 {
            return Err(Error::config("run.log_every", "must be at least 1"));
        }
        if !self.agent_config.matches(self.agent) {
            return Err(Error::config(
                "run.agent",
                format!("agent settings do not describe a {} agent", self.agent),
            ));
        }
        self.env.validate()?;
        self.agent_config.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("run.name", &self.name);
        kv.set("run.agent", self.agent);
        kv.set("run.total_steps", self.total_steps);
        kv.set(
            "run.seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        kv.set("run.checkpoint_every", self.checkpoint_every);
        kv.set("run.log_every", self.log_every);
        kv.set("run.out_dir", self.out_dir.display());
        self.env.write_kv(&mut kv);
        self.agent_config.write_kv(&mut kv);
        kv
    }

    /// Reads a spec; missing keys take the defaults for `run.agent`.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let agent: AgentKind = kv
            .get_parsed("run.agent")?
            .ok_or_else(|| Error::config("run.agent", "missing"))?;
        let name = kv.get("run.name").unwrap_or("run").to_string();
        let mut spec = Self::new(name, agent, EnvConfig::from_kv(kv)?);
        spec.agent_config = spec.agent_config.read_kv(kv)?;
        if let Some(v) = kv.get_parsed("run.total_steps")? {
            spec.total_steps = v;
        }
        if let Some(raw) = kv.get("run.seeds") {
            spec.seeds = parse_seeds(raw)?;
        }
        if let Some(v) = kv.get_parsed("run.checkpoint_every")? {
            spec.checkpoint_every = v;
        }
        if let Some(v) = kv.get_parsed("run.log_every")? {
            spec.log_every = v;
        }
        if let Some(v) = kv.get("run.out_dir") {
            spec.out_dir = PathBuf::from(v);
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Digest over the settings that influence training results.
    pub fn digest(&self) -> String {
        let mut kv = self.to_kv();
        kv.remove("run.out_dir");
        kv.remove("run.seeds");
        kv.digest()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir().join(format!("seed{seed}"))
    }

    /// Environment settings for one seed of the run.
    pub fn env_for_seed(&self, seed: u64) -> EnvConfig {
        self.env.clone().with_seed(seed)
    }
}

/// Parses a comma-separated seed list such as `0,1,2`.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|e| Error::config("run.seeds", format!("`{s}`: {e}")))
        })
        .collect()
}

/// Seed of the agent's own random stream for run seed `seed`.
pub fn agent_seed(seed: u64) -> u64 {
    episode_seed(seed ^ 0xA6E7_5EED_0000_0000, u64::MAX)
}

/// Losses reported by one learning update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateLoss {
    pub loss: f64,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
}

/// A learner of any supported kind.
#[derive(Debug, Clone)]
pub enum Agent {
    Dqn(Box<DqnAgent>),
    ActorCritic(Box<ActorCriticAgent>),
}

impl Agent {
    pub fn new(config: &AgentConfig, obs_dim: usize, seed: u64) -> Result<Self> {
        Ok(match config {
            AgentConfig::Dqn(c) => Agent::Dqn(Box::new(DqnAgent::new(c.clone(), obs_dim, seed)?)),
            AgentConfig::ActorCritic(c) => {
                Agent::ActorCritic(Box::new(ActorCriticAgent::new(c.clone(), obs_dim, seed)?))
            }
        })
    }

    pub fn act(&mut self, obs: &[f64]) -> Result<PolicyAction> {
        match self {
            Agent::Dqn(a) => a.act(obs),
            Agent::ActorCritic(a) => a.act(obs),
        }
    }

    pub fn observe(&mut self, t: Transition) -> Result<Option<UpdateLoss>> {
        Ok(match self {
            Agent::Dqn(a) => a.observe(t)?.map(|s| UpdateLoss {
                loss: s.loss,
                ..UpdateLoss::default()
            }),
            Agent::ActorCritic(a) => a.observe(t)?.map(|s| UpdateLoss {
                loss: s.policy_loss + a.config().value_coef * s.value_loss - a.config().entropy_coef * s.entropy,
                policy_loss: Some(s.policy_loss),
                value_loss: Some(s.value_loss),
                entropy: Some(s.entropy),
            }),
        })
    }

    /// Network used for greedy play: the online Q-net or the policy net.
    pub fn net(&self) -> &MlpWeights {
        match self {
            Agent::Dqn(a) => a.online(),
            Agent::ActorCritic(a) => a.net(),
        }
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<PolicyAction> {
        greedy_action(self.net(), obs)
    }

    /// Epsilon for value-based agents, mean policy entropy otherwise.
    pub fn exploration(&self) -> f64 {
        match self {
            Agent::Dqn(a) => a.epsilon(),
            Agent::ActorCritic(a) => a.last_entropy(),
        }
    }

    pub fn updates(&self) -> u64 {
        match self {
            Agent::Dqn(a) => a.updates(),
            Agent::ActorCritic(a) => a.updates(),
        }
    }

    pub fn write_state(&self, w: &mut Writer) {
        match self {
            Agent::Dqn(a) => a.write_state(w),
            Agent::ActorCritic(a) => a.write_state(w),
        }
    }

    pub fn read_state(config: &AgentConfig, r: &mut Reader<'_>) -> Result<Self> {
        Ok(match config {
            AgentConfig::Dqn(c) => Agent::Dqn(Box::new(DqnAgent::read_state(c.clone(), r)?)),
            AgentConfig::ActorCritic(c) => Agent::ActorCritic(Box::new(ActorCriticAgent::read_state(c.clone(), r)?)),
        })
    }
}

/// Path of the checkpoint written at `step`.
/// Run spec and seed recorded in `seed_dir/manifest.txt`.
pub fn read_manifest(seed_dir: &Path) -> Result<(RunSpec, u64)> {
    let kv = KvMap::load(&seed_dir.join("manifest.txt"))?;
    let spec = RunSpec::from_kv(&kv)?;
    let seed = kv
        .get_parsed("manifest.seed")?
        .ok_or_else(|| Error::config("manifest.seed", "missing"))?;
    Ok((spec, seed))
}

pub fn checkpoint_path(seed_dir: &Path, step: u64) -> PathBuf {
    seed_dir.join(format!("ckpt_{step}.aysw"))
}

/// Checkpoints in a seed directory, ordered by step.
pub fn list_checkpoints(seed_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = std::fs::read_dir(seed_dir).map_err(|e| Error::io(seed_dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(seed_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".aysw"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            found.push((step, entry.path()));
        }
    }
    found.sort();
    Ok(found)
}

/// Latest checkpoint of a seed directory.
pub fn final_checkpoint(seed_dir: &Path) -> Result<PathBuf> {
    list_checkpoints(seed_dir)?
        .pop()
        .map(|(_, p)| p)
        .ok_or_else(|| Error::Usage(format!("no checkpoints in {}", seed_dir.display())))
}
