//! Deep Q-learning with optional double targets, dueling head and prioritized replay.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::prioritized::PrioritizedReplay;
use super::replay::{Transition, UniformReplay};
use super::schedule::LinearSchedule;
use super::{act_epsilon_greedy, argmax, clip_grad_norm};
use crate::codec::{Reader, Writer};
use crate::dynamics::{format_f64, PolicyAction};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::neural::{AdamConfig, AdamState, HeadKind, MlpSpec, MlpWeights, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct DqnConfig {
    pub gamma: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub capacity: usize,
    /// Environment steps between hard copies of the online net into the target net.
    pub target_sync: u64,
    /// Environment steps collected before the first update.
    pub warmup: u64,
    /// Environment steps per gradient update.
    pub train_every: u64,
    pub epsilon: LinearSchedule,
    pub double: bool,
    pub dueling: bool,
    pub prioritized: bool,
    pub priority_alpha: f64,
    /// Importance-sampling exponent, annealed over environment steps.
    pub beta: LinearSchedule,
    pub huber: bool,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
}

impl DqnConfig {
    pub fn dqn() -> Self {
        Self {
            gamma: 0.99,
            adam: AdamConfig::default(),
            batch_size: 128,
            capacity: 1 << 17,
            target_sync: 1000,
            warmup: 1000,
            train_every: 1,
            epsilon: LinearSchedule::new(1.0, 0.05, 100_000),
            double: false,
            dueling: false,
            prioritized: false,
            priority_alpha: 0.6,
            beta: LinearSchedule::new(0.4, 1.0, 500_000),
            huber: false,
            max_grad_norm: 10.0,
        }
    }

    pub fn d3qn() -> Self {
        Self {
            double: true,
            dueling: true,
            prioritized: true,
            ..Self::dqn()
        }
    }

    pub fn head(&self) -> HeadKind {
        if self.dueling {
            HeadKind::Dueling
        } else {
            HeadKind::Plain
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("agent.gamma", "must lie in (0, 1]"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("agent.lr", "must be positive"));
        }
        for (key, v) in [
            ("agent.batch_size", self.batch_size as u64),
            ("agent.capacity", self.capacity as u64),
            ("agent.target_sync", self.target_sync),
            ("agent.train_every", self.train_every),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        for (key, v) in [
            ("agent.eps_start", self.epsilon.start),
            ("agent.eps_end", self.epsilon.end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        if !(self.priority_alpha >= 0.0 && self.priority_alpha.is_finite()) {
            return Err(Error::config("agent.priority_alpha", "must be non-negative"));
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm < 0.0 {
            return Err(Error::config("agent.max_grad_norm", "must be non-negative"));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("agent.gamma", format_f64(self.gamma));
        kv.set("agent.lr", format_f64(self.adam.lr));
        kv.set("agent.batch_size", self.batch_size);
        kv.set("agent.capacity", self.capacity);
        kv.set("agent.target_sync", self.target_sync);
        kv.set("agent.warmup", self.warmup);
        kv.set("agent.train_every", self.train_every);
        kv.set("agent.eps_start", format_f64(self.epsilon.start));
        kv.set("agent.eps_end", format_f64(self.epsilon.end));
        kv.set("agent.eps_decay_steps", self.epsilon.steps);
        kv.set("agent.double", self.double);
        kv.set("agent.dueling", self.dueling);
        kv.set("agent.prioritized", self.prioritized);
        kv.set("agent.priority_alpha", format_f64(self.priority_alpha));
        kv.set("agent.beta_start", format_f64(self.beta.start));
        kv.set("agent.beta_end", format_f64(self.beta.end));
        kv.set("agent.beta_steps", self.beta.steps);
        kv.set("agent.huber", self.huber);
        kv.set("agent.max_grad_norm", format_f64(self.max_grad_norm));
    }

    /// Applies `agent.*` keys over `self`.
    pub fn read_kv(self, kv: &KvMap) -> Result<Self> {
        let d = self;
        let cfg = Self {
            gamma: kv.get_parsed("agent.gamma")?.unwrap_or(d.gamma),
            adam: AdamConfig {
                lr: kv.get_parsed("agent.lr")?.unwrap_or(d.adam.lr),
                ..d.adam
            },
            batch_size: kv.get_parsed("agent.batch_size")?.unwrap_or(d.batch_size),
            capacity: kv.get_parsed("agent.capacity")?.unwrap_or(d.capacity),
            target_sync: kv.get_parsed("agent.target_sync")?.unwrap_or(d.target_sync),
            warmup: kv.get_parsed("agent.warmup")?.unwrap_or(d.warmup),
            train_every: kv.get_parsed("agent.train_every")?.unwrap_or(d.train_every),
            epsilon: LinearSchedule::new(
                kv.get_parsed("agent.eps_start")?.unwrap_or(d.epsilon.start),
                kv.get_parsed("agent.eps_end")?.unwrap_or(d.epsilon.end),
                kv.get_parsed("agent.eps_decay_steps")?.unwrap_or(d.epsilon.steps),
            ),
            double: kv.get_parsed("agent.double")?.unwrap_or(d.double),
            dueling: kv.get_parsed("agent.dueling")?.unwrap_or(d.dueling),
            prioritized: kv.get_parsed("agent.prioritized")?.unwrap_or(d.prioritized),
            priority_alpha: kv.get_parsed("agent.priority_alpha")?.unwrap_or(d.priority_alpha),
            beta: LinearSchedule::new(
                kv.get_parsed("agent.beta_start")?.unwrap_or(d.beta.start),
                kv.get_parsed("agent.beta_end")?.unwrap_or(d.beta.end),
                kv.get_parsed("agent.beta_steps")?.unwrap_or(d.beta.steps),
            ),
            huber: kv.get_parsed("agent.huber")?.unwrap_or(d.huber),
            max_grad_norm: kv.get_parsed("agent.max_grad_norm")?.unwrap_or(d.max_grad_norm),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Row-major minibatch of transitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DqnBatch {
    pub dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<PolicyAction>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub dones: Vec<bool>,
}

impl DqnBatch {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.actions.clear();
        self.rewards.clear();
        self.next_obs.clear();
        self.dones.clear();
    }

    pub fn push(&mut self, obs: &[f64], action: PolicyAction, reward: f64, next_obs: &[f64], done: bool) {
        assert_eq!(obs.len(), self.dim, "observation width");
        assert_eq!(next_obs.len(), self.dim, "observation width");
        self.obs.extend_from_slice(obs);
        self.actions.push(action);
        self.rewards.push(reward);
        self.next_obs.extend_from_slice(next_obs);
        self.dones.push(done);
    }

    pub fn from_transitions<'a>(dim: usize, items: impl IntoIterator<Item = &'a Transition>) -> Self {
        let mut b = Self::new(dim);
        for t in items {
            b.push(&t.obs, t.action, t.reward, &t.next_obs, t.done);
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnStats {
    pub loss: f64,
    pub td_errors: Vec<f64>,
}

/// Bellman targets `r + gamma * (1 - done) * Q_target(s', a*)`, with `a*` taken
/// from the target net (plain) or the online net (double).
pub fn dqn_targets(batch: &DqnBatch, online: &MlpWeights, target: &MlpWeights, gamma: f64, double: bool) -> Vec<f64> {
    let mut t_online = Tape::new(online.spec(), batch.len());
    let mut t_target = Tape::new(target.spec(), batch.len());
    let mut out = Vec::with_capacity(batch.len());
    targets_into(
        batch,
        online,
        target,
        gamma,
        double,
        &mut t_online,
        &mut t_target,
        &mut out,
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn targets_into(
    batch: &DqnBatch,
    online: &MlpWeights,
    target: &MlpWeights,
    gamma: f64,
    double: bool,
    t_online: &mut Tape,
    t_target: &mut Tape,
    out: &mut Vec<f64>,
) {
    assert!(!batch.is_empty(), "empty batch");
    out.clear();
    target.forward_batch(&batch.next_obs, t_target);
    if double {
        online.forward_batch(&batch.next_obs, t_online);
    }
    for i in 0..batch.len() {
        let next = if batch.dones[i] {
            0.0
        } else {
            let qt = t_target.output(i);
            let a = if double { argmax(t_online.output(i)) } else { argmax(qt) };
            qt[a]
        };
        out.push(batch.rewards[i] + gamma * next);
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Replay {
    Uniform(UniformReplay),
    Prioritized(PrioritizedReplay),
}

impl Replay {
    fn len(&self) -> usize {
        match self {
            Replay::Uniform(r) => r.len(),
            Replay::Prioritized(r) => r.len(),
        }
    }

    fn storage(&self) -> &UniformReplay {
        match self {
            Replay::Uniform(r) => r,
            Replay::Prioritized(r) => r.storage(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    config: DqnConfig,
    online: MlpWeights,
    target: MlpWeights,
    adam: AdamState,
    replay: Replay,
    rng: ChaCha8Rng,
    env_steps: u64,
    updates: u64,
    batch: DqnBatch,
    weights: Vec<f64>,
    targets: Vec<f64>,
    upstream: Vec<f64>,
    grads: Vec<f64>,
    tape: Tape,
    tape_next: Tape,
    tape_target: Tape,
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"AYSQ";
const SNAPSHOT_VERSION: u32 = 1;

impl DqnAgent {
    pub fn new(config: DqnConfig, obs_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::with_spec(config.clone(), MlpSpec::new(obs_dim, config.head()), seed)
    }

    /// Agent over a custom network shape; the head kind must match `config`.
    pub fn with_spec(config: DqnConfig, spec: MlpSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if spec.head != config.head() {
            return Err(Error::SpecMismatch(format!(
                "network head {} but config expects {}",
                spec.head,
                config.head()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = MlpWeights::init(spec, &mut rng);
        Ok(Self::assemble(config, online, rng))
    }

    fn assemble(config: DqnConfig, online: MlpWeights, rng: ChaCha8Rng) -> Self {
        let spec = *online.spec();
        let dim = spec.input_dim;
        let replay = if config.prioritized {
            Replay::Prioritized(PrioritizedReplay::new(config.capacity, dim, config.priority_alpha))
        } else {
            Replay::Uniform(UniformReplay::new(config.capacity, dim))
        };
        let n = config.batch_size;
        Self {
            adam: AdamState::new(spec.param_count(), config.adam),
            target: online.clone(),
            replay,
            rng,
            env_steps: 0,
            updates: 0,
            batch: DqnBatch::new(dim),
            weights: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
            upstream: vec![0.0; n * spec.output_width()],
            grads: vec![0.0; spec.param_count()],
            tape: Tape::new(&spec, n),
            tape_next: Tape::new(&spec, n),
            tape_target: Tape::new(&spec, n),
            online,
            config,
        }
    }

    pub fn config(&self) -> &DqnConfig {
        &self.config
    }

    pub fn online(&self) -> &MlpWeights {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut MlpWeights {
        &mut self.online
    }

    pub fn target(&self) -> &MlpWeights {
        &self.target
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn replay_storage(&self) -> &UniformReplay {
        self.replay.storage()
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon.value(self.env_steps)
    }

    pub fn sync_target(&mut self) {
        self.target.copy_from(&self.online);
    }

    /// Exploratory action at the current schedule position.
    pub fn act(&mut self, obs: &[f64]) -> Result<PolicyAction> {
        let eps = self.epsilon();
        act_epsilon_greedy(&self.online, obs, eps, &mut self.rng)
    }

    /// Stores a transition, then updates and syncs when their periods come due.
    pub fn observe(&mut self, t: Transition) -> Result<Option<LearnStats>> {
        if t.obs.len() != self.online.spec().input_dim || t.next_obs.len() != t.obs.len() {
            return Err(Error::Usage("transition observation width".into()));
        }
        match &mut self.replay {
            Replay::Uniform(r) => {
                r.push(t);
            }
            Replay::Prioritized(r) => {
                r.push(t);
            }
        }
        self.env_steps += 1;
        let mut stats = None;
        if self.env_steps >= self.config.warmup
            && self.replay.len() >= self.config.batch_size
            && self.env_steps.is_multiple_of(self.config.train_every)
        {
            stats = Some(self.learn()?);
        }
        if self.env_steps.is_multiple_of(self.config.target_sync) {
            self.sync_target();
        }
        Ok(stats)
    }

    /// One update on a minibatch drawn from replay.
    pub fn learn(&mut self) -> Result<LearnStats> {
        let n = self.config.batch_size;
        let mut batch = std::mem::take(&mut self.batch);
        let mut weights = std::mem::take(&mut self.weights);
        batch.clear();
        weights.clear();
        let indices = match &self.replay {
            Replay::Uniform(r) => {
                let idx = r.sample_indices(n, &mut self.rng);
                weights.resize(n, 1.0);
                idx
            }
            Replay::Prioritized(r) => {
                let beta = self.config.beta.value(self.env_steps);
                let s = r.sample(n, beta, &mut self.rng);
                weights.extend_from_slice(&s.weights);
                s.indices
            }
        };
        let storage = self.replay.storage();
        for &i in &indices {
            let t = storage.get(i);
            batch.push(t.obs, t.action, t.reward, t.next_obs, t.done);
        }
        let result = self.learn_on_batch(&batch, &weights);
        self.batch = batch;
        self.weights = weights;
        let stats = result?;
        if let Replay::Prioritized(r) = &mut self.replay {
            r.update_from_td(&indices, &stats.td_errors);
        }
        Ok(stats)
    }

    /// Gradient step on importance-weighted squared (or Huber) TD error of the
    /// chosen actions. Returns the loss before the step.
    pub fn learn_on_batch(&mut self, batch: &DqnBatch, is_weights: &[f64]) -> Result<LearnStats> {
        let n = batch.len();
        if n == 0 || is_weights.len() != n {
            return Err(Error::Usage(format!(
                "batch of {n} with {} importance weights",
                is_weights.len()
            )));
        }
        if self.tape.batch() != n {
            let spec = *self.online.spec();
            self.tape = Tape::new(&spec, n);
            self.tape_next = Tape::new(&spec, n);
            self.tape_target = Tape::new(&spec, n);
            self.upstream = vec![0.0; n * spec.output_width()];
        }
        let mut targets = std::mem::take(&mut self.targets);
        targets_into(
            batch,
            &self.online,
            &self.target,
            self.config.gamma,
            self.config.double,
            &mut self.tape_next,
            &mut self.tape_target,
            &mut targets,
        );
        self.online.forward_batch(&batch.obs, &mut self.tape);
        let width = self.online.spec().output_width();
        self.upstream.iter_mut().for_each(|u| *u = 0.0);
        let mut loss = 0.0;
        let mut td_errors = Vec::with_capacity(n);
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let a = batch.actions[i].index();
            let td = self.tape.output(i)[a] - targets[i];
            let w = is_weights[i];
            let (l, g) = if self.config.huber && td.abs() > 1.0 {
                (td.abs() - 0.5, td.signum())
            } else if self.config.huber {
                (0.5 * td * td, td)
            } else {
                (td * td, 2.0 * td)
            };
            loss += w * l * inv_n;
            self.upstream[i * width + a] = w * g * inv_n;
            td_errors.push(td);
        }
        self.targets = targets;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("dqn loss {loss}")));
        }
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.online
            .backward_batch(&mut self.tape, &self.upstream, &mut self.grads);
        clip_grad_norm(&mut self.grads, self.config.max_grad_norm);
        self.adam.update(self.online.params_mut(), &self.grads)?;
        self.updates += 1;
        Ok(LearnStats { loss, td_errors })
    }

    /// Serializes everything needed to continue training bit-identically.
    pub fn write_state(&self, w: &mut Writer) {
        w.bytes(SNAPSHOT_MAGIC);
        w.u32(SNAPSHOT_VERSION);
        let spec = self.online.spec();
        w.u64(spec.input_dim as u64);
        w.u64(spec.hidden_dim as u64);
        w.u64(spec.output_dim as u64);
        w.u8(spec.head.code());
        w.u64(self.env_steps);
        w.u64(self.updates);
        w.rng(&self.rng);
        w.f64s(self.online.params());
        w.f64s(self.target.params());
        w.u64(self.adam.step);
        w.f64s(&self.adam.m);
        w.f64s(&self.adam.v);
        let storage = self.replay.storage();
        w.u64(storage.capacity() as u64);
        w.u64(storage.cursor() as u64);
        w.u64(storage.len() as u64);
        for t in storage.slots() {
            for x in t.obs {
                w.f64(*x);
            }
            w.u8(t.action.index() as u8);
            w.f64(t.reward);
            for x in t.next_obs {
                w.f64(*x);
            }
            w.bool(t.done);
        }
        if let Replay::Prioritized(r) = &self.replay {
            w.f64(r.max_priority());
            w.f64s(&r.leaf_values());
        }
    }

    /// Inverse of [`DqnAgent::write_state`]; `config` must describe the same agent.
    pub fn read_state(config: DqnConfig, r: &mut Reader<'_>) -> Result<Self> {
        config.validate()?;
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(r.malformed("not a DQN snapshot"));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(r.malformed(format!("unsupported snapshot version {version}")));
        }
        let dim = r.u64()? as usize;
        let hidden = r.u64()? as usize;
        let outputs = r.u64()? as usize;
        let head = r.u8()?;
        if head != config.head().code() {
            return Err(Error::SpecMismatch(format!(
                "snapshot head code {head}, config expects {}",
                config.head()
            )));
        }
        let spec = MlpSpec {
            input_dim: dim,
            hidden_dim: hidden,
            output_dim: outputs,
            head: config.head(),
        };
        spec.validate()?;
        let env_steps = r.u64()?;
        let updates = r.u64()?;
        let rng = r.rng()?;
        let online = MlpWeights::from_params(spec, r.f64s()?)?;
        let target = MlpWeights::from_params(spec, r.f64s()?)?;
        let adam_step = r.u64()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != spec.param_count() || v.len() != spec.param_count() {
            return Err(r.malformed("optimizer moments do not match the network"));
        }
        let capacity = r.u64()? as usize;
        if capacity != config.capacity {
            return Err(Error::SpecMismatch(format!(
                "snapshot replay capacity {capacity}, config expects {}",
                config.capacity
            )));
        }
        let cursor = r.u64()? as usize;
        let len = r.u64()? as usize;
        if len > capacity || cursor >= capacity.max(1) {
            return Err(r.malformed("replay cursor out of range"));
        }
        let mut slots = Vec::with_capacity(len);
        for _ in 0..len {
            let obs = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let action = PolicyAction::from_index(r.u8()? as usize).map_err(|_| r.malformed("invalid action index"))?;
            let reward = r.f64()?;
            let next_obs = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let done = r.bool()?;
            slots.push(Transition {
                obs,
                action,
                reward,
                next_obs,
                done,
            });
        }
        let storage = UniformReplay::restore(capacity, dim, cursor, slots);
        let replay = if config.prioritized {
            let max_priority = r.f64()?;
            let leaves = r.f64s()?;
            if leaves.len() != len {
                return Err(r.malformed("priority count does not match replay length"));
            }
            Replay::Prioritized(PrioritizedReplay::restore(
                storage,
                config.priority_alpha,
                max_priority,
                &leaves,
            ))
        } else {
            Replay::Uniform(storage)
        };
        let mut agent = Self::assemble(config, online, rng);
        agent.target = target;
        agent.adam.step = adam_step;
        agent.adam.m = m;
        agent.adam.v = v;
        agent.replay = replay;
        agent.env_steps = env_steps;
        agent.updates = updates;
        Ok(agent)
    }
}
