//! Data products computed from trained networks: success grids, action-share
//! curves, trajectory exports, reward traces and exact Shapley attributions.

mod grid;
mod shapley;
mod shares;
mod trajectories;

use std::fmt::Write as _;
use std::path::Path;

use crate::agents::greedy_action;
use crate::env::{self, EnvConfig, Episode};
use crate::error::{Error, Result};
use crate::neural::MlpWeights;

pub use grid::{success_grid, success_grid_with, Quadrant, SuccessGrid};
pub use shapley::{
    explain_q, feature_names, replay_baseline, sample_rows, shapley_values, ShapleyReport, ShapleyRow, MAX_FEATURES,
};
pub use shares::{action_share_curve, share_curve_from_episodes, window_shares, ActionShareCurve};
pub use trajectories::{
    export_trajectories, reward_per_action_trace, trace_to_csv, write_trajectories, TraceRow, TrajectoryHeader,
};

/// Fails unless `net` reads the observations `env` produces.
pub fn check_compatible(net: &MlpWeights, env: &EnvConfig) -> Result<()> {
    let dim = env.observability.dim();
    if net.spec().input_dim != dim {
        return Err(Error::SpecMismatch(format!(
            "network takes {} inputs, {} observations have {dim}",
            net.spec().input_dim,
            env.observability
        )));
    }
    Ok(())
}

/// Greedy episodes `0..episodes` of `seed`.
pub fn greedy_episodes(net: &MlpWeights, env: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<Episode>> {
    check_compatible(net, env)?;
    let env = env.clone().with_seed(seed);
    (0..episodes)
        .map(|i| {
            let (state, obs) = env::reset_episode(&env, i as u64);
            env::rollout(&env, state, obs, |o| {
                greedy_action(net, o.as_slice()).expect("observation width checked")
            })
        })
        .collect()
}

/// Every observation a greedy policy sees over episodes `0..episodes` of
/// `seed`, row-major.
pub fn greedy_observations(net: &MlpWeights, env: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    check_compatible(net, env)?;
    let env = env.clone().with_seed(seed);
    let mut rows = Vec::new();
    for i in 0..episodes {
        let (state, obs) = env::reset_episode(&env, i as u64);
        env::rollout(&env, state, obs, |o| {
            rows.extend_from_slice(o.as_slice());
            greedy_action(net, o.as_slice()).expect("observation width checked")
        })?;
    }
    Ok(rows)
}

/// CSV preamble: each line of `meta` as a `# key: value` comment.
pub(crate) fn csv_header(meta: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        let _ = writeln!(out, "# {k}: {v}");
    }
    out
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
