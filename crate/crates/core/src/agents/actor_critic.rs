//! Advantage actor-critic and proximal policy optimization over a shared
//! policy/value network.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::clip_grad_norm;
use super::replay::Transition;
use crate::codec::{Reader, Writer};
use crate::dynamics::{format_f64, PolicyAction};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::neural::{AdamConfig, AdamState, HeadKind, MlpSpec, MlpWeights, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyAlgorithm {
    A2c,
    Ppo,
}

impl PolicyAlgorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyAlgorithm::A2c => "a2c",
            PolicyAlgorithm::Ppo => "ppo",
        }
    }
}

impl fmt::Display for PolicyAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2c" => Ok(PolicyAlgorithm::A2c),
            "ppo" => Ok(PolicyAlgorithm::Ppo),
            _ => Err(Error::Usage(format!("unknown policy algorithm `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticConfig {
    pub algorithm: PolicyAlgorithm,
    pub gamma: f64,
    pub adam: AdamConfig,
    /// Environment steps per rollout (and per update phase).
    pub rollout_len: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// GAE weighting; 1 gives plain n-step returns.
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub normalize_advantages: bool,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
}

impl ActorCriticConfig {
    pub fn a2c() -> Self {
        Self {
            algorithm: PolicyAlgorithm::A2c,
            gamma: 0.99,
            adam: AdamConfig::default(),
            rollout_len: 256,
            entropy_coef: 0.01,
            value_coef: 0.5,
            gae_lambda: 1.0,
            clip: 0.2,
            epochs: 1,
            minibatch_size: 256,
            normalize_advantages: false,
            max_grad_norm: 0.5,
        }
    }

    pub fn ppo() -> Self {
        Self {
            algorithm: PolicyAlgorithm::Ppo,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch_size: 64,
            normalize_advantages: true,
            ..Self::a2c()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("agent.gamma", "must lie in (0, 1]"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("agent.lr", "must be positive"));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config("agent.clip", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("agent.gae_lambda", "must lie in [0, 1]"));
        }
        for (key, v) in [
            ("agent.rollout_len", self.rollout_len),
            ("agent.epochs", self.epochs),
            ("agent.minibatch_size", self.minibatch_size),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        for (key, v) in [
            ("agent.entropy_coef", self.entropy_coef),
            ("agent.value_coef", self.value_coef),
            ("agent.max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("agent.algorithm", self.algorithm);
        kv.set("agent.gamma", format_f64(self.gamma));
        kv.set("agent.lr", format_f64(self.adam.lr));
        kv.set("agent.rollout_len", self.rollout_len);
        kv.set("agent.entropy_coef", format_f64(self.entropy_coef));
        kv.set("agent.value_coef", format_f64(self.value_coef));
        kv.set("agent.gae_lambda", format_f64(self.gae_lambda));
        kv.set("agent.clip", format_f64(self.clip));
        kv.set("agent.epochs", self.epochs);
        kv.set("agent.minibatch_size", self.minibatch_size);
        kv.set("agent.normalize_advantages", self.normalize_advantages);
        kv.set("agent.max_grad_norm", format_f64(self.max_grad_norm));
    }

    /// Applies `agent.*` keys over `self`.
    pub fn read_kv(self, kv: &KvMap) -> Result<Self> {
        let d = self;
        let cfg = Self {
            algorithm: kv.get_parsed("agent.algorithm")?.unwrap_or(d.algorithm),
            gamma: kv.get_parsed("agent.gamma")?.unwrap_or(d.gamma),
            adam: AdamConfig {
                lr: kv.get_parsed("agent.lr")?.unwrap_or(d.adam.lr),
                ..d.adam
            },
            rollout_len: kv.get_parsed("agent.rollout_len")?.unwrap_or(d.rollout_len),
            entropy_coef: kv.get_parsed("agent.entropy_coef")?.unwrap_or(d.entropy_coef),
            value_coef: kv.get_parsed("agent.value_coef")?.unwrap_or(d.value_coef),
            gae_lambda: kv.get_parsed("agent.gae_lambda")?.unwrap_or(d.gae_lambda),
            clip: kv.get_parsed("agent.clip")?.unwrap_or(d.clip),
            epochs: kv.get_parsed("agent.epochs")?.unwrap_or(d.epochs),
            minibatch_size: kv.get_parsed("agent.minibatch_size")?.unwrap_or(d.minibatch_size),
            normalize_advantages: kv
                .get_parsed("agent.normalize_advantages")?
                .unwrap_or(d.normalize_advantages),
            max_grad_norm: kv.get_parsed("agent.max_grad_norm")?.unwrap_or(d.max_grad_norm),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// On-policy segment with behavior log-probabilities and value estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<PolicyAction>,
    pub rewards: Vec<f64>,
    /// True when the step ended its episode.
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Value of the state following the last step (0 when it was terminal).
    pub bootstrap_value: f64,
}

impl Rollout {
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
        self.dones.clear();
        self.values.clear();
        self.log_probs.clear();
        self.bootstrap_value = 0.0;
    }

    pub fn push(&mut self, obs: &[f64], action: PolicyAction, reward: f64, done: bool, value: f64, log_prob: f64) {
        assert_eq!(obs.len(), self.dim, "observation width");
        self.obs.extend_from_slice(obs);
        self.actions.push(action);
        self.rewards.push(reward);
        self.dones.push(done);
        self.values.push(value);
        self.log_probs.push(log_prob);
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Generalized advantage estimates and the matching return targets.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "rollout column lengths");
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap_value;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Means over the samples of one update phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ActorCriticAgent {
    config: ActorCriticConfig,
    net: MlpWeights,
    adam: AdamState,
    rng: ChaCha8Rng,
    rollout: Rollout,
    env_steps: u64,
    updates: u64,
    last_entropy: f64,
    grads: Vec<f64>,
    upstream: Vec<f64>,
    inputs: Vec<f64>,
    tape: Tape,
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"AYSP";
const SNAPSHOT_VERSION: u32 = 1;

impl ActorCriticAgent {
    pub fn new(config: ActorCriticConfig, obs_dim: usize, seed: u64) -> Result<Self> {
        Self::with_spec(config, MlpSpec::new(obs_dim, HeadKind::ActorCritic), seed)
    }

    pub fn with_spec(config: ActorCriticConfig, spec: MlpSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if spec.head != HeadKind::ActorCritic {
            return Err(Error::SpecMismatch(format!(
                "actor-critic agent needs an actor-critic head, got {}",
                spec.head
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpWeights::init(spec, &mut rng);
        Ok(Self::assemble(config, net, rng))
    }

    fn assemble(config: ActorCriticConfig, net: MlpWeights, rng: ChaCha8Rng) -> Self {
        let spec = *net.spec();
        Self {
            adam: AdamState::new(spec.param_count(), config.adam),
            rollout: Rollout::new(spec.input_dim),
            env_steps: 0,
            updates: 0,
            last_entropy: (spec.output_dim as f64).ln(),
            grads: vec![0.0; spec.param_count()],
            upstream: Vec::new(),
            inputs: Vec::new(),
            tape: Tape::new(&spec, 1),
            net,
            rng,
            config,
        }
    }

    pub fn config(&self) -> &ActorCriticConfig {
        &self.config
    }

    pub fn net(&self) -> &MlpWeights {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpWeights {
        &mut self.net
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Mean policy entropy over the most recent update phase.
    pub fn last_entropy(&self) -> f64 {
        self.last_entropy
    }

    /// Action probabilities and state value.
    pub fn policy(&self, obs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let out = self.net.forward_vec(obs)?;
        let o = self.net.spec().output_dim;
        Ok((softmax(&out[..o]), out[o]))
    }

    /// Samples from the current policy.
    pub fn act(&mut self, obs: &[f64]) -> Result<PolicyAction> {
        let (probs, _) = self.policy(obs)?;
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        PolicyAction::from_index(pick)
    }

    /// Appends a step to the rollout and runs an update once it is full.
    pub fn observe(&mut self, t: Transition) -> Result<Option<UpdateStats>> {
        let out = self.net.forward_vec(&t.obs)?;
        let o = self.net.spec().output_dim;
        let a = t.action.index();
        if a >= o {
            return Err(Error::Usage(format!("action {} outside policy head", t.action)));
        }
        let logp = log_softmax(&out[..o])[a];
        self.rollout.push(&t.obs, t.action, t.reward, t.done, out[o], logp);
        self.env_steps += 1;
        if self.rollout.len() < self.config.rollout_len {
            return Ok(None);
        }
        self.rollout.bootstrap_value = if t.done {
            0.0
        } else {
            self.net.forward_vec(&t.next_obs)?[o]
        };
        let rollout = std::mem::take(&mut self.rollout);
        let result = self.update(&rollout);
        self.rollout = rollout;
        self.rollout.clear();
        result.map(Some)
    }

    /// Runs the configured algorithm over a complete rollout.
    pub fn update(&mut self, rollout: &Rollout) -> Result<UpdateStats> {
        if rollout.is_empty() {
            return Err(Error::Usage("empty rollout".into()));
        }
        let (mut adv, returns) = gae(
            &rollout.rewards,
            &rollout.values,
            &rollout.dones,
            rollout.bootstrap_value,
            self.config.gamma,
            self.config.gae_lambda,
        );
        if self.config.normalize_advantages && adv.len() > 1 {
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt() + 1e-8;
            adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
        }
        let n = rollout.len();
        let stats = match self.config.algorithm {
            PolicyAlgorithm::A2c => {
                let idx: Vec<usize> = (0..n).collect();
                self.gradient_step(rollout, &idx, &adv, &returns, false)?
            }
            PolicyAlgorithm::Ppo => {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut total = UpdateStats::default();
                let mut count = 0.0;
                for _ in 0..self.config.epochs {
                    idx.shuffle(&mut self.rng);
                    for chunk in idx.chunks(self.config.minibatch_size) {
                        let s = self.gradient_step(rollout, chunk, &adv, &returns, true)?;
                        let w = chunk.len() as f64;
                        total.policy_loss += w * s.policy_loss;
                        total.value_loss += w * s.value_loss;
                        total.entropy += w * s.entropy;
                        total.approx_kl += w * s.approx_kl;
                        total.clip_fraction += w * s.clip_fraction;
                        count += w;
                    }
                }
                UpdateStats {
                    policy_loss: total.policy_loss / count,
                    value_loss: total.value_loss / count,
                    entropy: total.entropy / count,
                    approx_kl: total.approx_kl / count,
                    clip_fraction: total.clip_fraction / count,
                }
            }
        };
        self.last_entropy = stats.entropy;
        Ok(stats)
    }

    /// Loss `policy + c_v * mean (V - R)^2 - c_e * mean H` over `idx`, then one
    /// Adam step. With `clipped`, the policy term is the negated PPO surrogate.
    fn gradient_step(
        &mut self,
        rollout: &Rollout,
        idx: &[usize],
        adv: &[f64],
        returns: &[f64],
        clipped: bool,
    ) -> Result<UpdateStats> {
        let spec = *self.net.spec();
        let o = spec.output_dim;
        let width = spec.output_width();
        let n = idx.len();
        if self.tape.batch() != n {
            self.tape = Tape::new(&spec, n);
        }
        self.inputs.clear();
        for &i in idx {
            self.inputs.extend_from_slice(rollout.row(i));
        }
        self.net.forward_batch(&self.inputs, &mut self.tape);
        self.upstream.clear();
        self.upstream.resize(n * width, 0.0);
        let inv_n = 1.0 / n as f64;
        let (ce, cv, eps) = (self.config.entropy_coef, self.config.value_coef, self.config.clip);
        let mut stats = UpdateStats::default();
        for (k, &i) in idx.iter().enumerate() {
            let out = self.tape.output(k);
            let logp = log_softmax(&out[..o]);
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let h = entropy(&probs);
            let a = rollout.actions[i].index();
            let value = out[o];
            let (coef, policy_loss) = if clipped {
                let ratio = (logp[a] - rollout.log_probs[i]).exp();
                let clamped = ratio.clamp(1.0 - eps, 1.0 + eps);
                let saturated = (adv[i] > 0.0 && ratio > 1.0 + eps) || (adv[i] < 0.0 && ratio < 1.0 - eps);
                if saturated {
                    stats.clip_fraction += inv_n;
                }
                stats.approx_kl += (rollout.log_probs[i] - logp[a]) * inv_n;
                let coef = if saturated { 0.0 } else { ratio * adv[i] };
                (coef, -(ratio * adv[i]).min(clamped * adv[i]))
            } else {
                (adv[i], -logp[a] * adv[i])
            };
            let verr = value - returns[i];
            stats.policy_loss += policy_loss * inv_n;
            stats.value_loss += verr * verr * inv_n;
            stats.entropy += h * inv_n;
            let up = &mut self.upstream[k * width..(k + 1) * width];
            for j in 0..o {
                let onehot = if j == a { 1.0 } else { 0.0 };
                up[j] = (-coef * (onehot - probs[j]) + ce * probs[j] * (logp[j] + h)) * inv_n;
            }
            up[o] = cv * 2.0 * verr * inv_n;
        }
        let total = stats.policy_loss + cv * stats.value_loss - ce * stats.entropy;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("{} loss {total}", self.config.algorithm)));
        }
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.net.backward_batch(&mut self.tape, &self.upstream, &mut self.grads);
        clip_grad_norm(&mut self.grads, self.config.max_grad_norm);
        self.adam.update(self.net.params_mut(), &self.grads)?;
        self.updates += 1;
        Ok(stats)
    }

    /// Serializes everything needed to continue training bit-identically.
    pub fn write_state(&self, w: &mut Writer) {
        let spec = self.net.spec();
        w.bytes(SNAPSHOT_MAGIC);
        w.u32(SNAPSHOT_VERSION);
        w.u64(spec.input_dim as u64);
        w.u64(spec.hidden_dim as u64);
        w.u64(spec.output_dim as u64);
        w.u64(self.env_steps);
        w.u64(self.updates);
        w.f64(self.last_entropy);
        w.rng(&self.rng);
        w.f64s(self.net.params());
        w.u64(self.adam.step);
        w.f64s(&self.adam.m);
        w.f64s(&self.adam.v);
        let r = &self.rollout;
        w.u64(r.len() as u64);
        w.f64s(&r.obs);
        for a in &r.actions {
            w.u8(a.index() as u8);
        }
        w.f64s(&r.rewards);
        for d in &r.dones {
            w.bool(*d);
        }
        w.f64s(&r.values);
        w.f64s(&r.log_probs);
    }

    pub fn read_state(config: ActorCriticConfig, r: &mut Reader<'_>) -> Result<Self> {
        config.validate()?;
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(r.malformed("not an actor-critic snapshot"));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(r.malformed(format!("unsupported snapshot version {version}")));
        }
        let spec = MlpSpec {
            input_dim: r.u64()? as usize,
            hidden_dim: r.u64()? as usize,
            output_dim: r.u64()? as usize,
            head: HeadKind::ActorCritic,
        };
        spec.validate()?;
        let env_steps = r.u64()?;
        let updates = r.u64()?;
        let last_entropy = r.f64()?;
        let rng = r.rng()?;
        let net = MlpWeights::from_params(spec, r.f64s()?)?;
        let step = r.u64()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != spec.param_count() || v.len() != spec.param_count() {
            return Err(r.malformed("optimizer moments do not match the network"));
        }
        let len = r.u64()? as usize;
        let mut rollout = Rollout::new(spec.input_dim);
        rollout.obs = r.f64s()?;
        for _ in 0..len {
            let a = PolicyAction::from_index(r.u8()? as usize).map_err(|_| r.malformed("invalid action index"))?;
            rollout.actions.push(a);
        }
        rollout.rewards = r.f64s()?;
        for _ in 0..len {
            rollout.dones.push(r.bool()?);
        }
        rollout.values = r.f64s()?;
        rollout.log_probs = r.f64s()?;
        if rollout.obs.len() != len * spec.input_dim
            || rollout.rewards.len() != len
            || rollout.values.len() != len
            || rollout.log_probs.len() != len
        {
            return Err(r.malformed("rollout columns disagree in length"));
        }
        let mut agent = Self::assemble(config, net, rng);
        agent.adam.step = step;
        agent.adam.m = m;
        agent.adam.v = v;
        agent.rollout = rollout;
        agent.env_steps = env_steps;
        agent.updates = updates;
        agent.last_entropy = last_entropy;
        Ok(agent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn bandit_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 1,
            hidden_dim: 16,
            output_dim: 2,
            head: HeadKind::ActorCritic,
        }
    }

    fn bandit_transition(action: PolicyAction) -> Transition {
        Transition {
            obs: vec![1.0],
            action,
            reward: if action.index() == 1 { 1.0 } else { 0.0 },
            next_obs: vec![1.0],
            done: true,
        }
    }

    fn train_bandit(config: ActorCriticConfig, seed: u64) -> f64 {
        let config = ActorCriticConfig {
            rollout_len: 8,
            minibatch_size: 8,
            ..config
        };
        let mut agent = ActorCriticAgent::with_spec(config, bandit_spec(), seed).unwrap();
        while agent.updates() < 2000 {
            let a = agent.act(&[1.0]).unwrap();
            agent.observe(bandit_transition(a)).unwrap();
        }
        agent.policy(&[1.0]).unwrap().0[1]
    }

    #[test]
    fn a2c_solves_two_armed_bandit() {
        let p = train_bandit(ActorCriticConfig::a2c(), 0);
        assert!(p > 0.95, "{p}");
    }

    #[test]
    fn ppo_solves_two_armed_bandit() {
        let p = train_bandit(ActorCriticConfig::ppo(), 0);
        assert!(p > 0.95, "{p}");
    }

    #[test]
    fn gae_with_unit_lambda_is_n_step_return() {
        let rewards = [1.0, 0.0, 2.0];
        let values = [0.5, 0.25, 1.0];
        let dones = [false, false, false];
        let (adv, ret) = gae(&rewards, &values, &dones, 4.0, 0.5, 1.0);
        let r2 = 2.0 + 0.5 * 4.0;
        let r1 = 0.0 + 0.5 * r2;
        let r0 = 1.0 + 0.5 * r1;
        assert_eq!(ret, vec![r0, r1, r2]);
        assert_eq!(adv, vec![r0 - 0.5, r1 - 0.25, r2 - 1.0]);
        let (_, cut) = gae(&rewards, &values, &[false, true, false], 4.0, 0.5, 1.0);
        assert_eq!(cut[1], 0.0);
        assert_eq!(cut[0], 1.0);
    }

    #[test]
    fn uniform_logits_have_maximal_entropy() {
        let h = entropy(&softmax(&[0.3; 4]));
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!(entropy(&softmax(&[1.0, 0.0, 0.0, 0.0])) < h);
    }

    fn agent_and_rollout(config: ActorCriticConfig) -> (ActorCriticAgent, Rollout) {
        let spec = MlpSpec {
            input_dim: 3,
            hidden_dim: 8,
            output_dim: 4,
            head: HeadKind::ActorCritic,
        };
        let agent = ActorCriticAgent::with_spec(config, spec, 3).unwrap();
        let mut rollout = Rollout::new(3);
        for i in 0..6 {
            let obs = [i as f64 * 0.1, 0.5, 1.0 - i as f64 * 0.1];
            let out = agent.net().forward_vec(&obs).unwrap();
            let a = PolicyAction::from_index(i % 4).unwrap();
            let logp = log_softmax(&out[..4])[a.index()];
            rollout.push(&obs, a, i as f64, i == 5, out[4], logp);
        }
        (agent, rollout)
    }

    fn policy_grads(agent: &mut ActorCriticAgent, rollout: &Rollout, adv: &[f64], clipped: bool) -> Vec<f64> {
        agent.config.entropy_coef = 0.0;
        agent.config.value_coef = 0.0;
        agent.config.max_grad_norm = 0.0;
        let returns = rollout.values.clone();
        let idx: Vec<usize> = (0..rollout.len()).collect();
        let before = agent.net.clone();
        agent.gradient_step(rollout, &idx, adv, &returns, clipped).unwrap();
        let grads = agent.grads.clone();
        agent.net = before;
        grads
    }

    #[test]
    fn zero_advantage_gives_zero_policy_gradient() {
        let (mut agent, rollout) = agent_and_rollout(ActorCriticConfig::a2c());
        let g = policy_grads(&mut agent, &rollout, &[0.0; 6], false);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn unit_ratio_surrogate_matches_policy_gradient() {
        let (mut agent, rollout) = agent_and_rollout(ActorCriticConfig::ppo());
        let adv = [0.5, -1.0, 2.0, 0.1, -0.3, 1.5];
        let plain = policy_grads(&mut agent, &rollout, &adv, false);
        let surrogate = policy_grads(&mut agent, &rollout, &adv, true);
        for (a, b) in plain.iter().zip(&surrogate) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn saturated_ratio_contributes_nothing() {
        let (mut agent, mut rollout) = agent_and_rollout(ActorCriticConfig::ppo());
        // Behavior probabilities far below current ones: ratio >> 1 + clip.
        rollout.log_probs.iter_mut().for_each(|l| *l -= 5.0);
        let g = policy_grads(&mut agent, &rollout, &[1.0; 6], true);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn policy_gradient_matches_finite_difference() {
        let (mut agent, rollout) = agent_and_rollout(ActorCriticConfig::a2c());
        agent.config.entropy_coef = 0.05;
        agent.config.max_grad_norm = 0.0;
        let adv = [0.5, -1.0, 2.0, 0.1, -0.3, 1.5];
        let returns = [1.0, 0.0, -1.0, 2.0, 0.5, 0.3];
        let idx: Vec<usize> = (0..6).collect();
        let loss = |net: &MlpWeights| -> f64 {
            let mut total = 0.0;
            for i in 0..6 {
                let out = net.forward_vec(rollout.row(i)).unwrap();
                let logp = log_softmax(&out[..4]);
                let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                let a = rollout.actions[i].index();
                total += -logp[a] * adv[i] + 0.5 * (out[4] - returns[i]).powi(2) - 0.05 * entropy(&probs);
            }
            total / 6.0
        };
        let net = agent.net.clone();
        agent.gradient_step(&rollout, &idx, &adv, &returns, false).unwrap();
        let grads = agent.grads.clone();
        for k in (0..net.params().len()).step_by(7) {
            let mut plus = net.clone();
            plus.params_mut()[k] += 1e-6;
            let mut minus = net.clone();
            minus.params_mut()[k] -= 1e-6;
            let fd = (loss(&plus) - loss(&minus)) / 2e-6;
            assert!(
                (fd - grads[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {k}: {fd} vs {}",
                grads[k]
            );
        }
    }

    #[test]
    fn snapshot_resume_is_bit_identical() {
        for config in [ActorCriticConfig::a2c(), ActorCriticConfig::ppo()] {
            let config = ActorCriticConfig {
                rollout_len: 8,
                minibatch_size: 4,
                ..config
            };
            let mut a = ActorCriticAgent::with_spec(config.clone(), bandit_spec(), 9).unwrap();
            for _ in 0..21 {
                let act = a.act(&[1.0]).unwrap();
                a.observe(bandit_transition(act)).unwrap();
            }
            let mut w = Writer::new();
            a.write_state(&mut w);
            let bytes = w.into_bytes();
            let mut r = Reader::new(&bytes, Path::new("mem"));
            let mut b = ActorCriticAgent::read_state(config, &mut r).unwrap();
            r.finish().unwrap();
            for _ in 0..30 {
                let x = a.act(&[1.0]).unwrap();
                let y = b.act(&[1.0]).unwrap();
                assert_eq!(x, y);
                a.observe(bandit_transition(x)).unwrap();
                b.observe(bandit_transition(y)).unwrap();
            }
            assert_eq!(a.net().params(), b.net().params());
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = ActorCriticConfig {
            rollout_len: 128,
            ..ActorCriticConfig::ppo()
        };
        let mut kv = KvMap::new();
        cfg.write_kv(&mut kv);
        assert_eq!(ActorCriticConfig::a2c().read_kv(&kv).unwrap(), cfg);
        kv.set("agent.clip", "1.0");
        assert!(ActorCriticConfig::a2c().read_kv(&kv).is_err());
    }
}
