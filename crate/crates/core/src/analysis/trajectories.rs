use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{csv_header, greedy_episodes, write_text};
use crate::dynamics::{fixed_points, NormState, RawState};
use crate::env::{black_norm, Boundaries, EnvConfig, Episode, TrajectoryRecord, REFERENCE};
use crate::error::{Error, Result};
use crate::neural::MlpWeights;

/// First line of a trajectory export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format: String,
    pub version: u32,
    pub config_digest: String,
    pub observability: String,
    pub reward: String,
    pub episodes: usize,
    pub reference: RawState,
    pub green_norm: NormState,
    pub black_raw: RawState,
    pub black_norm: NormState,
    pub boundary_raw: RawState,
    pub boundary_norm: NormState,
}

impl TrajectoryHeader {
    pub const FORMAT: &'static str = "ays-trajectories";
    pub const VERSION: u32 = 1;

    pub fn new(env: &EnvConfig, episodes: usize, config_digest: &str) -> Self {
        let fp = fixed_points(&env.params);
        let b = Boundaries::PLANETARY;
        Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            config_digest: config_digest.into(),
            observability: env.observability.as_str().into(),
            reward: env.reward_kind.as_str().into(),
            episodes,
            reference: REFERENCE,
            green_norm: fp.green_norm,
            black_raw: fp.black,
            black_norm: black_norm(&env.params),
            boundary_raw: RawState::new(b.a_pb, b.y_pb, b.s_pb),
            boundary_norm: b.normalized(),
        }
    }
}

#[derive(Serialize)]
struct Line<'a> {
    episode: usize,
    #[serde(flatten)]
    record: &'a TrajectoryRecord,
}

/// Header line then one JSON object per record, tagged with its episode.
pub fn write_trajectories(path: &Path, env: &EnvConfig, episodes: &[Episode], config_digest: &str) -> Result<()> {
    let header = TrajectoryHeader::new(env, episodes.len(), config_digest);
    let json = |e: serde_json::Error| Error::Usage(format!("trajectory serialization: {e}"));
    let mut out = serde_json::to_string(&header).map_err(json)?;
    out.push('\n');
    for (episode, ep) in episodes.iter().enumerate() {
        for record in &ep.records {
            out.push_str(&serde_json::to_string(&Line { episode, record }).map_err(json)?);
            out.push('\n');
        }
    }
    write_text(path, &out)
}

/// Greedy episodes `0..episodes` of `seed`, written to `path`.
pub fn export_trajectories(
    net: &MlpWeights,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    path: &Path,
    config_digest: &str,
) -> Result<Vec<Episode>> {
    let eps = greedy_episodes(net, env, episodes, seed)?;
    write_trajectories(path, env, &eps, config_digest)?;
    Ok(eps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub action: String,
    pub reward: f64,
}

/// Per-step action and reward of greedy episode 0 of `seed`.
pub fn reward_per_action_trace(net: &MlpWeights, env: &EnvConfig, seed: u64) -> Result<Vec<TraceRow>> {
    let ep = greedy_episodes(net, env, 1, seed)?.remove(0);
    Ok(ep
        .records
        .iter()
        .filter_map(|r| {
            r.action.map(|a| TraceRow {
                t: r.t,
                action: a.label().into(),
                reward: r.reward,
            })
        })
        .collect())
}

pub fn trace_to_csv(rows: &[TraceRow], config_digest: &str) -> String {
    let mut out = csv_header(&[
        ("product", "reward_per_action_trace".to_string()),
        (
            "axes",
            "t = year after the action, reward = reward received".to_string(),
        ),
        ("config_digest", config_digest.to_string()),
    ]);
    out.push_str("t,action,reward\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.t, r.action, r.reward);
    }
    out
}
