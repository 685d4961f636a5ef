//! DQN, D3QN, A2C and PPO learners with their replay buffers and schedules.

pub mod actor_critic;
pub mod dqn;
pub mod prioritized;
pub mod replay;
pub mod schedule;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::PolicyAction;
use crate::error::{Error, Result};
use crate::neural::{HeadKind, MlpWeights};

pub use actor_critic::{ActorCriticAgent, ActorCriticConfig, Rollout, UpdateStats};
pub use dqn::{DqnAgent, DqnBatch, DqnConfig, LearnStats};
pub use prioritized::{PrioritizedReplay, PrioritySample, PRIORITY_FLOOR};
pub use replay::{Transition, TransitionRef, UniformReplay};
pub use schedule::{epsilon_schedule, LinearSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Dqn,
    D3qn,
    A2c,
    Ppo,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Dqn, AgentKind::D3qn, AgentKind::A2c, AgentKind::Ppo];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::D3qn => "d3qn",
            AgentKind::A2c => "a2c",
            AgentKind::Ppo => "ppo",
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            AgentKind::Dqn => HeadKind::Plain,
            AgentKind::D3qn => HeadKind::Dueling,
            AgentKind::A2c | AgentKind::Ppo => HeadKind::ActorCritic,
        }
    }

    pub fn is_value_based(self) -> bool {
        matches!(self, AgentKind::Dqn | AgentKind::D3qn)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dqn" => Ok(AgentKind::Dqn),
            "d3qn" => Ok(AgentKind::D3qn),
            "a2c" => Ok(AgentKind::A2c),
            "ppo" => Ok(AgentKind::Ppo),
            _ => Err(Error::Usage(format!(
                "unknown agent `{s}` (expected dqn, d3qn, a2c or ppo)"
            ))),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn act_epsilon_greedy<R: Rng + ?Sized>(
    qnet: &MlpWeights,
    obs: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<PolicyAction> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Usage(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return PolicyAction::from_index(rng.random_range(0..qnet.spec().output_dim));
    }
    greedy_action(qnet, obs)
}

/// Argmax over Q values, or over logits for an actor-critic net.
pub fn greedy_action(net: &MlpWeights, obs: &[f64]) -> Result<PolicyAction> {
    let out = net.forward_vec(obs)?;
    PolicyAction::from_index(argmax(&out[..net.spec().output_dim]))
}

/// Rescales `grads` to global L2 norm `max_norm` when it is larger; 0 disables.
pub(crate) fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::MlpSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain 1-input net whose output equals `q` for the input 1.0.
    fn constant_q(q: [f64; 4]) -> MlpWeights {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_dim: 1,
            output_dim: 4,
            head: HeadKind::Plain,
        };
        let mut w = MlpWeights::zeros(spec);
        let l = *w.layout();
        let p = w.params_mut();
        p[l.l0.b] = 1.0;
        p[l.l1.b] = 1.0;
        p[l.head.b..l.head.b + 4].copy_from_slice(&q);
        w
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 2.0, 0.0]), 1);
        assert_eq!(argmax(&[5.0, 5.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn greedy_with_zero_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = constant_q([1.0, 3.0, 2.0, 0.0]);
        let a = act_epsilon_greedy(&net, &[1.0], 0.0, &mut rng).unwrap();
        assert_eq!(a, PolicyAction::EnergyTransition);
        let tied = constant_q([5.0, 5.0, 0.0, 0.0]);
        let a = act_epsilon_greedy(&tied, &[1.0], 0.0, &mut rng).unwrap();
        assert_eq!(a, PolicyAction::Noop);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = constant_q([0.0, 9.0, 0.0, 0.0]);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[act_epsilon_greedy(&net, &[1.0], 1.0, &mut rng).unwrap().index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = constant_q([0.0; 4]);
        assert!(act_epsilon_greedy(&net, &[1.0], 1.5, &mut rng).is_err());
    }

    #[test]
    fn agent_kind_parse() {
        for k in AgentKind::ALL {
            assert_eq!(k.as_str().parse::<AgentKind>().unwrap(), k);
        }
        assert!("sac".parse::<AgentKind>().is_err());
    }
}
