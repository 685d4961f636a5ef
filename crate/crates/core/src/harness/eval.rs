use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::greedy_action;
use crate::dynamics::PolicyAction;
use crate::env::{self, EnvConfig, Observation, TerminalCause};
use crate::error::{Error, Result};
use crate::neural::{load_weights, MlpWeights};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseCounts {
    pub green: usize,
    pub black: usize,
    pub boundary: usize,
    pub timeout: usize,
}

impl CauseCounts {
    pub fn add(&mut self, cause: TerminalCause) {
        match cause {
            TerminalCause::Green => self.green += 1,
            TerminalCause::Black => self.black += 1,
            TerminalCause::Boundary => self.boundary += 1,
            TerminalCause::Timeout => self.timeout += 1,
            TerminalCause::None => unreachable!("finished episodes have a terminal cause"),
        }
    }

    pub fn total(&self) -> usize {
        self.green + self.black + self.boundary + self.timeout
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
    pub causes: CauseCounts,
}

/// Runs `episodes` episodes of `policy`; episode `i` starts from the reset
/// draw of episode `i` under `seed`.
pub fn evaluate_policy<F>(env: &EnvConfig, episodes: usize, seed: u64, mut policy: F) -> Result<EvalStats>
where
    F: FnMut(&Observation) -> PolicyAction,
{
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let env = env.clone().with_seed(seed);
    let mut causes = CauseCounts::default();
    let (mut ret, mut len) = (0.0, 0usize);
    for i in 0..episodes {
        let (state, obs) = env::reset_episode(&env, i as u64);
        let ep = env::rollout(&env, state, obs, &mut policy)?;
        causes.add(ep.cause);
        ret += ep.total_reward;
        len += ep.len();
    }
    let n = episodes as f64;
    Ok(EvalStats {
        episodes,
        success_rate: causes.green as f64 / n,
        mean_return: ret / n,
        mean_length: len as f64 / n,
        causes,
    })
}

/// Greedy evaluation: argmax Q, or argmax logit for actor-critic networks.
pub fn evaluate(net: &MlpWeights, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalStats> {
    let dim = env.observability.dim();
    if net.spec().input_dim != dim {
        return Err(Error::SpecMismatch(format!(
            "network takes {} inputs, {} observations have {dim}",
            net.spec().input_dim,
            env.observability
        )));
    }
    evaluate_policy(env, episodes, seed, |obs| {
        greedy_action(net, obs.as_slice()).expect("observation width checked")
    })
}

pub fn evaluate_checkpoint(path: &Path, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalStats> {
    evaluate(&load_weights(path)?, env, episodes, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovingAverage {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Trailing-window mean and population standard deviation. The first
/// `window - 1` points average over what is available.
pub fn moving_average(series: &[f64], window: usize) -> Result<MovingAverage> {
    if series.is_empty() {
        return Err(Error::Usage("moving average of an empty series".into()));
    }
    if window == 0 {
        return Err(Error::Usage("moving-average window must be at least 1".into()));
    }
    let mut mean = Vec::with_capacity(series.len());
    let mut std = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let w = &series[(i + 1).saturating_sub(window)..=i];
        let n = w.len() as f64;
        let m = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(MovingAverage { mean, std })
}
