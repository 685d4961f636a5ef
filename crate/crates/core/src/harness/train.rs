use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::metrics::{read_metrics, MetricRecord, MetricsHeader, MetricsWriter};
use super::{agent_seed, checkpoint_path, Agent, AgentConfig, RunSpec};
use crate::agents::Transition;
use crate::codec::{Reader, Writer};
use crate::dynamics::{ModelParams, PolicyAction, RawState};
use crate::env::{self, EnvConfig, EpisodeState, Observation};
use crate::error::{Error, Result};
use crate::neural::save_weights;

/// Outputs of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Episodic returns in completion order.
    pub returns: Vec<f64>,
    pub steps: u64,
}

impl SeedArtifacts {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("training writes a final checkpoint")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub seeds: Vec<SeedArtifacts>,
}

/// Trains every seed of `spec`, running up to `workers` seeds concurrently.
pub fn train(spec: &RunSpec, workers: usize) -> Result<RunArtifacts> {
    spec.validate()?;
    let workers = workers.clamp(1, spec.seeds.len());
    let results: Mutex<Vec<Option<Result<SeedArtifacts>>>> = Mutex::new(spec.seeds.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= spec.seeds.len() {
                    break;
                }
                let r = train_seed(spec, spec.seeds[i]);
                results.lock().expect("result slot lock")[i] = Some(r);
            });
        }
    });
    let seeds = results
        .into_inner()
        .expect("result slot lock")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunArtifacts {
        run_dir: spec.run_dir(),
        seeds,
    })
}

/// Trains one seed from scratch to `spec.total_steps`.
pub fn train_seed(spec: &RunSpec, seed: u64) -> Result<SeedArtifacts> {
    Trainer::fresh(spec, seed)?.run(spec.total_steps)
}

/// Trains one seed from scratch but stops after `stop_at` steps, leaving a
/// resumable checkpoint as an interruption would.
pub fn train_seed_until(spec: &RunSpec, seed: u64, stop_at: u64) -> Result<SeedArtifacts> {
    let stop = stop_at.min(spec.total_steps);
    let mut t = Trainer::fresh(spec, seed)?;
    let out = t.run(stop)?;
    if stop < spec.total_steps {
        t.checkpoint()?;
    }
    Ok(out)
}

/// Continues a seed from its `resume.bin` to `spec.total_steps`.
pub fn resume_seed(spec: &RunSpec, seed: u64) -> Result<SeedArtifacts> {
    Trainer::resume(spec, seed)?.run(spec.total_steps)
}

const RESUME_MAGIC: &[u8; 4] = b"AYSR";
const RESUME_VERSION: u32 = 1;

#[derive(Debug, Default, Clone, Copy)]
struct LossAccumulator {
    loss: f64,
    policy: f64,
    value: f64,
    entropy: f64,
    count: u64,
    has_parts: bool,
}

struct Trainer<'a> {
    spec: &'a RunSpec,
    seed: u64,
    env: EnvConfig,
    agent: Agent,
    state: EpisodeState,
    obs: Observation,
    step: u64,
    episode: u64,
    ep_return: f64,
    ep_len: usize,
    acc: LossAccumulator,
    dir: PathBuf,
    metrics: MetricsWriter,
    returns: Vec<f64>,
    checkpoints: Vec<PathBuf>,
}

/// Agent settings as used by the harness: importance-sampling annealing spans the run.
fn run_agent_config(spec: &RunSpec) -> AgentConfig {
    match &spec.agent_config {
        AgentConfig::Dqn(c) => {
            let mut c = c.clone();
            c.beta.steps = spec.total_steps;
            AgentConfig::Dqn(c)
        }
        other => other.clone(),
    }
}

fn read_resume(spec: &RunSpec, seed: u64, dir: &Path) -> Result<ResumeFile> {
    spec.validate()?;
    let path = dir.join("resume.bin");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = Reader::new(&bytes, &path);
    if r.take(4)? != RESUME_MAGIC {
        return Err(r.malformed("not a resume file"));
    }
    let version = r.u32()?;
    if version != RESUME_VERSION {
        return Err(r.malformed(format!("unsupported resume version {version}")));
    }
    let digest_len = r.u64()? as usize;
    let digest = String::from_utf8(r.take(digest_len)?.to_vec()).map_err(|_| r.malformed("digest is not text"))?;
    if digest != spec.digest() {
        return Err(Error::SpecMismatch(format!(
            "{} was written by a different run configuration",
            path.display()
        )));
    }
    if r.u64()? != seed {
        return Err(Error::SpecMismatch(format!(
            "{} belongs to another seed",
            path.display()
        )));
    }
    let step = r.u64()?;
    let episode = r.u64()?;
    let ep_return = r.f64()?;
    let ep_len = r.u64()? as usize;
    let acc = LossAccumulator {
        loss: r.f64()?,
        policy: r.f64()?,
        value: r.f64()?,
        entropy: r.f64()?,
        count: r.u64()?,
        has_parts: r.bool()?,
    };
    let raw = RawState::new(r.f64()?, r.f64()?, r.f64()?);
    let mut pv = [0.0; 8];
    for v in pv.iter_mut() {
        *v = r.f64()?;
    }
    let t = r.u64()? as usize;
    let done = r.bool()?;
    let last_action = PolicyAction::from_index(r.u8()? as usize).map_err(|_| r.malformed("invalid action index"))?;
    let state = EpisodeState {
        raw,
        params: ModelParams::from_values(pv),
        t,
        done,
        last_action,
    };
    let obs = Observation { values: r.f64s()? };
    let agent_config = run_agent_config(spec);
    let agent = Agent::read_state(&agent_config, &mut r)?;
    r.finish()?;
    Ok(ResumeFile {
        step,
        episode,
        ep_return,
        ep_len,
        acc,
        state,
        obs,
        agent,
    })
}

/// Agent of the latest checkpoint in `seed_dir`, including its replay memory.
pub fn load_agent(spec: &RunSpec, seed: u64, seed_dir: &Path) -> Result<Agent> {
    Ok(read_resume(spec, seed, seed_dir)?.agent)
}

struct ResumeFile {
    step: u64,
    episode: u64,
    ep_return: f64,
    ep_len: usize,
    acc: LossAccumulator,
    state: EpisodeState,
    obs: Observation,
    agent: Agent,
}

impl<'a> Trainer<'a> {
    fn fresh(spec: &'a RunSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let dir = spec.seed_dir(seed);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (_, old) in super::list_checkpoints(&dir)? {
            std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
        }
        let env = spec.env_for_seed(seed);
        let agent_config = run_agent_config(spec);
        let agent = Agent::new(&agent_config, env.observability.dim(), agent_seed(seed))?;
        let header = MetricsHeader::new(
            &spec.name,
            spec.agent.as_str(),
            env.reward_kind.as_str(),
            env.observability.as_str(),
            seed,
            &spec.digest(),
        );
        let metrics = MetricsWriter::create(&dir.join("metrics.jsonl"), &header)?;
        let (state, obs) = env::reset_episode(&env, 0);
        Ok(Self {
            spec,
            seed,
            env,
            agent,
            state,
            obs,
            step: 0,
            episode: 0,
            ep_return: 0.0,
            ep_len: 0,
            acc: LossAccumulator::default(),
            dir,
            metrics,
            returns: Vec::new(),
            checkpoints: Vec::new(),
        })
    }

    fn resume(spec: &'a RunSpec, seed: u64) -> Result<Self> {
        let ResumeFile {
            step,
            episode,
            ep_return,
            ep_len,
            acc,
            state,
            obs,
            agent,
        } = read_resume(spec, seed, &spec.seed_dir(seed))?;
        let dir = spec.seed_dir(seed);
        let metrics_path = dir.join("metrics.jsonl");
        let metrics = MetricsWriter::resume(&metrics_path, step)?;
        let (_, records) = read_metrics(&metrics_path)?;
        let returns = records
            .iter()
            .filter_map(|rec| match rec {
                MetricRecord::Episode { episodic_return, .. } => Some(*episodic_return),
                _ => None,
            })
            .collect();
        let checkpoints = super::list_checkpoints(&dir)?
            .into_iter()
            .filter(|(s, _)| *s <= step)
            .map(|(_, p)| p)
            .collect();
        Ok(Self {
            spec,
            seed,
            env: spec.env_for_seed(seed),
            agent,
            state,
            obs,
            step,
            episode,
            ep_return,
            ep_len,
            acc,
            dir,
            metrics,
            returns,
            checkpoints,
        })
    }

    fn run(&mut self, until: u64) -> Result<SeedArtifacts> {
        while self.step < until {
            if let Err(e) = self.advance() {
                self.metrics.append(&MetricRecord::Error {
                    step: self.step,
                    message: e.to_string(),
                })?;
                return Err(e);
            }
            let period = self.spec.checkpoint_every;
            if self.step == self.spec.total_steps || (period > 0 && self.step.is_multiple_of(period)) {
                self.checkpoint()?;
            }
        }
        Ok(SeedArtifacts {
            seed: self.seed,
            dir: self.dir.clone(),
            metrics: self.dir.join("metrics.jsonl"),
            checkpoints: self.checkpoints.clone(),
            returns: self.returns.clone(),
            steps: self.step,
        })
    }

    fn advance(&mut self) -> Result<()> {
        let action = self.agent.act(self.obs.as_slice())?;
        let (next, out) = env::step(&self.state, action, &self.env)?;
        let transition = Transition {
            obs: self.obs.values.clone(),
            action,
            reward: out.reward,
            next_obs: out.obs.values.clone(),
            done: out.done,
        };
        if let Some(l) = self.agent.observe(transition)? {
            self.acc.loss += l.loss;
            self.acc.count += 1;
            if let (Some(p), Some(v), Some(h)) = (l.policy_loss, l.value_loss, l.entropy) {
                self.acc.policy += p;
                self.acc.value += v;
                self.acc.entropy += h;
                self.acc.has_parts = true;
            }
        }
        self.step += 1;
        self.ep_return += out.reward;
        self.ep_len += 1;
        if out.done {
            self.metrics.append(&MetricRecord::Episode {
                step: self.step,
                episode: self.episode,
                episodic_return: self.ep_return,
                length: self.ep_len,
                cause: out.cause,
                explore: self.agent.exploration(),
            })?;
            self.returns.push(self.ep_return);
            self.episode += 1;
            let (state, obs) = env::reset_episode(&self.env, self.episode);
            self.state = state;
            self.obs = obs;
            self.ep_return = 0.0;
            self.ep_len = 0;
        } else {
            self.state = next;
            self.obs = out.obs;
        }
        if self.step.is_multiple_of(self.spec.log_every) && self.acc.count > 0 {
            let n = self.acc.count as f64;
            let parts = self.acc.has_parts;
            self.metrics.append(&MetricRecord::Loss {
                step: self.step,
                updates: self.agent.updates(),
                loss: self.acc.loss / n,
                policy_loss: parts.then(|| self.acc.policy / n),
                value_loss: parts.then(|| self.acc.value / n),
                entropy: parts.then(|| self.acc.entropy / n),
            })?;
            self.acc = LossAccumulator::default();
        }
        Ok(())
    }

    fn checkpoint(&mut self) -> Result<()> {
        let path = checkpoint_path(&self.dir, self.step);
        save_weights(self.agent.net(), &path)?;
        if !self.checkpoints.contains(&path) {
            self.checkpoints.push(path.clone());
        }
        self.write_resume()?;
        self.write_manifest(&path)
    }

    fn write_resume(&self) -> Result<()> {
        let mut w = Writer::new();
        w.bytes(RESUME_MAGIC);
        w.u32(RESUME_VERSION);
        let digest = self.spec.digest();
        w.u64(digest.len() as u64);
        w.bytes(digest.as_bytes());
        w.u64(self.seed);
        w.u64(self.step);
        w.u64(self.episode);
        w.f64(self.ep_return);
        w.u64(self.ep_len as u64);
        w.f64(self.acc.loss);
        w.f64(self.acc.policy);
        w.f64(self.acc.value);
        w.f64(self.acc.entropy);
        w.u64(self.acc.count);
        w.bool(self.acc.has_parts);
        for v in self.state.raw.to_array() {
            w.f64(v);
        }
        for v in self.state.params.values() {
            w.f64(v);
        }
        w.u64(self.state.t as u64);
        w.bool(self.state.done);
        w.u8(self.state.last_action.index() as u8);
        w.f64s(&self.obs.values);
        self.agent.write_state(&mut w);
        let path = self.dir.join("resume.bin");
        let tmp = self.dir.join("resume.bin.tmp");
        std::fs::write(&tmp, w.into_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn write_manifest(&self, ckpt: &Path) -> Result<()> {
        let mut kv = self.spec.to_kv();
        kv.set("manifest.seed", self.seed);
        kv.set("manifest.step", self.step);
        kv.set("manifest.episodes", self.episode);
        kv.set("manifest.obs_dim", self.env.observability.dim());
        kv.set("manifest.head", self.agent.net().spec().head);
        kv.set("manifest.config_digest", self.spec.digest());
        kv.set(
            "manifest.checkpoint",
            ckpt.file_name().expect("checkpoint file name").to_string_lossy(),
        );
        kv.save(&self.dir.join("manifest.txt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentKind;
    use crate::neural::load_weights;

    fn quick_spec(dir: &Path, agent: AgentKind) -> RunSpec {
        let mut spec = RunSpec::new("quick", agent, EnvConfig::default());
        spec.total_steps = 600;
        spec.seeds = vec![3];
        spec.checkpoint_every = 250;
        spec.log_every = 100;
        spec.out_dir = dir.to_path_buf();
        if let AgentConfig::Dqn(c) = &mut spec.agent_config {
            c.batch_size = 16;
            c.capacity = 256;
            c.warmup = 50;
            c.target_sync = 100;
        }
        if let AgentConfig::ActorCritic(c) = &mut spec.agent_config {
            c.rollout_len = 32;
            c.minibatch_size = 16;
        }
        spec
    }

    #[test]
    fn same_spec_gives_identical_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let spec = quick_spec(dir.path(), AgentKind::Dqn);
        let a = train(&spec, 1).unwrap();
        let first = std::fs::read(&a.seeds[0].metrics).unwrap();
        let b = train(&spec, 1).unwrap();
        let second = std::fs::read(&b.seeds[0].metrics).unwrap();
        assert_eq!(first, second);
        let names: Vec<_> = a.seeds[0]
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["ckpt_250.aysw", "ckpt_500.aysw", "ckpt_600.aysw"]);
        assert!(dir.path().join("quick/seed3/manifest.txt").exists());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        for agent in AgentKind::ALL {
            let dir = tempfile::tempdir().unwrap();
            let spec = quick_spec(dir.path(), agent);
            let full = train_seed(&spec, 3).unwrap();
            let full_metrics = std::fs::read(&full.metrics).unwrap();
            let full_net = load_weights(full.final_checkpoint()).unwrap();

            let partial = train_seed_until(&spec, 3, 333).unwrap();
            assert_eq!(partial.steps, 333);
            let resumed = resume_seed(&spec, 3).unwrap();
            assert_eq!(resumed.returns, full.returns, "{agent}");
            assert_eq!(std::fs::read(&resumed.metrics).unwrap(), full_metrics, "{agent}");
            let net = load_weights(resumed.final_checkpoint()).unwrap();
            assert_eq!(net.params(), full_net.params(), "{agent}");
        }
    }

    #[test]
    fn resume_rejects_changed_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = quick_spec(dir.path(), AgentKind::Dqn);
        train_seed_until(&spec, 3, 100).unwrap();
        let mut other = spec.clone();
        other.env.goal_tol = 0.06;
        assert!(matches!(resume_seed(&other, 3), Err(Error::SpecMismatch(_))));
    }
}
