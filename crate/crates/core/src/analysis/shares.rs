use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::Serialize;

use super::{csv_header, greedy_episodes};
use crate::dynamics::PolicyAction;
use crate::env::{EnvConfig, Episode, TerminalCause};
use crate::error::{Error, Result};
use crate::neural::MlpWeights;

/// Cumulative action shares. `shares[t]` covers the actions at indices
/// `0..=t` of every episode that reached that index; `support[t]` counts the
/// episodes still running at index `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionShareCurve {
    pub episodes: usize,
    pub shares: Vec<[f64; PolicyAction::COUNT]>,
    pub support: Vec<usize>,
}

impl ActionShareCurve {
    pub fn share_at(&self, t: usize, action: PolicyAction) -> Option<f64> {
        self.shares.get(t).map(|s| s[action.index()])
    }

    /// `t,NOOP,ET,DG,ET_DG,support` rows under a `#` comment block.
    pub fn to_csv(&self, config_digest: &str) -> String {
        let mut out = csv_header(&[
            ("product", "action_share_curve".to_string()),
            (
                "axes",
                "t = action index from 0, columns = cumulative share per action".to_string(),
            ),
            ("episodes", self.episodes.to_string()),
            ("config_digest", config_digest.to_string()),
        ]);
        out.push('t');
        for a in PolicyAction::ALL {
            out.push(',');
            out.push_str(a.label());
        }
        out.push_str(",support\n");
        for (t, row) in self.shares.iter().enumerate() {
            let _ = write!(out, "{t}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", self.support[t]);
        }
        out
    }
}

pub fn share_curve_from_episodes<'a, I>(episodes: I) -> ActionShareCurve
where
    I: IntoIterator<Item = &'a Episode>,
{
    let mut counts: Vec<[usize; PolicyAction::COUNT]> = Vec::new();
    let mut support = Vec::new();
    let mut n = 0;
    for ep in episodes {
        n += 1;
        for (t, a) in ep.actions().enumerate() {
            if counts.len() <= t {
                counts.push([0; PolicyAction::COUNT]);
                support.push(0);
            }
            counts[t][a.index()] += 1;
            support[t] += 1;
        }
    }
    let mut running = [0usize; PolicyAction::COUNT];
    let shares = counts
        .iter()
        .map(|c| {
            for (r, x) in running.iter_mut().zip(c) {
                *r += x;
            }
            let total: usize = running.iter().sum();
            running.map(|r| r as f64 / total as f64)
        })
        .collect();
    ActionShareCurve {
        episodes: n,
        shares,
        support,
    }
}

/// Greedy share curve over `episodes` episodes of `seed`, restricted to
/// successful episodes unless `successful_only` is false.
pub fn action_share_curve(
    net: &MlpWeights,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    successful_only: bool,
) -> Result<ActionShareCurve> {
    let eps = greedy_episodes(net, env, episodes, seed)?;
    let kept: Vec<&Episode> = eps
        .iter()
        .filter(|e| !successful_only || e.cause == TerminalCause::Green)
        .collect();
    if kept.is_empty() {
        return Err(Error::Usage(format!(
            "no episode out of {episodes} qualifies for the share curve"
        )));
    }
    Ok(share_curve_from_episodes(kept))
}

/// Non-cumulative share of each action among the actions taken at 1-based
/// steps `steps`.
pub fn window_shares<'a, I>(episodes: I, steps: RangeInclusive<usize>) -> Option<[f64; PolicyAction::COUNT]>
where
    I: IntoIterator<Item = &'a Episode>,
{
    let mut counts = [0usize; PolicyAction::COUNT];
    for ep in episodes {
        for (i, a) in ep.actions().enumerate() {
            if steps.contains(&(i + 1)) {
                counts[a.index()] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.map(|c| c as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TrajectoryRecord;

    fn episode(actions: &[PolicyAction]) -> Episode {
        let rec = |action| TrajectoryRecord {
            t: 0,
            action,
            raw_a: 0.0,
            raw_y: 0.0,
            raw_s: 0.0,
            a: 0.0,
            y: 0.0,
            s: 0.0,
            reward: 0.0,
            cause: TerminalCause::None,
        };
        let mut records = vec![rec(None)];
        records.extend(actions.iter().map(|a| rec(Some(*a))));
        Episode {
            records,
            cause: TerminalCause::Green,
            total_reward: 0.0,
        }
    }

    #[test]
    fn single_episode_shares() {
        use PolicyAction::*;
        let ep = episode(&[EnergyTransition, EnergyTransition, DeGrowth]);
        let c = share_curve_from_episodes([&ep]);
        assert_eq!(c.shares[0], [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(c.share_at(2, EnergyTransition), Some(2.0 / 3.0));
        assert_eq!(c.share_at(2, DeGrowth), Some(1.0 / 3.0));
        assert_eq!(c.share_at(3, DeGrowth), None);
    }

    #[test]
    fn short_episodes_stop_contributing() {
        use PolicyAction::*;
        let a = episode(&[Noop]);
        let b = episode(&[DeGrowth, DeGrowth, DeGrowth]);
        let c = share_curve_from_episodes([&a, &b]);
        assert_eq!(c.support, vec![2, 1, 1]);
        assert_eq!(c.shares[0], [0.5, 0.0, 0.5, 0.0]);
        assert_eq!(c.shares[2], [0.25, 0.0, 0.75, 0.0]);
        for row in &c.shares {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let csv = c.to_csv("x");
        assert!(csv.contains("t,NOOP,ET,DG,ET_DG,support\n0,0.5,0,0.5,0,2\n"));
    }

    #[test]
    fn windows_are_one_based() {
        use PolicyAction::*;
        let ep = episode(&[Noop, DeGrowth, DeGrowth, EnergyTransition]);
        assert_eq!(window_shares([&ep], 1..=1), Some([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(window_shares([&ep], 2..=4), Some([0.0, 1.0 / 3.0, 2.0 / 3.0, 0.0]));
        assert_eq!(window_shares([&ep], 5..=9), None);
    }
}
