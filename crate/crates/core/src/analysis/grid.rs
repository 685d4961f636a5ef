use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{check_compatible, csv_header};
use crate::agents::greedy_action;
use crate::dynamics::{NormState, PolicyAction};
use crate::env::{self, EnvConfig, Observation, TerminalCause};
use crate::error::{Error, Result};
use crate::neural::MlpWeights;

/// Half-width of the reset distribution in normalized units.
const SPREAD: f64 = 0.05;

/// Corner quadrant of the (a0, y0) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Quadrant {
    LowALowY,
    LowAHighY,
    HighALowY,
    HighAHighY,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::LowALowY,
        Quadrant::LowAHighY,
        Quadrant::HighALowY,
        Quadrant::HighAHighY,
    ];

    pub fn opposite(self) -> Self {
        match self {
            Quadrant::LowALowY => Quadrant::HighAHighY,
            Quadrant::LowAHighY => Quadrant::HighALowY,
            Quadrant::HighALowY => Quadrant::LowAHighY,
            Quadrant::HighAHighY => Quadrant::LowALowY,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::LowALowY => "low_a_low_y",
            Quadrant::LowAHighY => "low_a_high_y",
            Quadrant::HighALowY => "high_a_low_y",
            Quadrant::HighAHighY => "high_a_high_y",
        }
    }

    fn low_a(self) -> bool {
        matches!(self, Quadrant::LowALowY | Quadrant::LowAHighY)
    }

    fn low_y(self) -> bool {
        matches!(self, Quadrant::LowALowY | Quadrant::HighALowY)
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quadrant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Quadrant::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown quadrant `{s}`")))
    }
}

/// Success fraction per initial state. `cells[i][j]` is the cell at
/// `a_offsets[i]`, `y_offsets[j]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuccessGrid {
    pub resolution: usize,
    pub a_offsets: Vec<f64>,
    pub y_offsets: Vec<f64>,
    pub s0: f64,
    pub episodes_per_cell: usize,
    pub policies: usize,
    pub cells: Vec<Vec<f64>>,
}

impl SuccessGrid {
    /// Mean over the cells strictly inside a quadrant; the middle row and
    /// column of odd grids belong to none.
    pub fn quadrant_mean(&self, q: Quadrant) -> f64 {
        let n = self.resolution;
        let side = |i: usize, low: bool| if low { 2 * i + 1 < n } else { 2 * i + 1 > n };
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, row) in self.cells.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if side(i, q.low_a()) && side(j, q.low_y()) {
                    total += v;
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    /// Quadrant with the highest mean (first in [`Quadrant::ALL`] on ties).
    pub fn best_quadrant(&self) -> Quadrant {
        let mut best = Quadrant::ALL[0];
        for q in Quadrant::ALL {
            if self.quadrant_mean(q) > self.quadrant_mean(best) {
                best = q;
            }
        }
        best
    }

    pub fn mean(&self) -> f64 {
        let n = (self.resolution * self.resolution) as f64;
        self.cells.iter().flatten().sum::<f64>() / n
    }

    /// `a_offset,y_offset,success` rows under a `#` comment block.
    pub fn to_csv(&self, config_digest: &str) -> String {
        let mut out = csv_header(&[
            ("product", "success_grid".to_string()),
            (
                "axes",
                "a_offset = normalized a0 - 0.5, y_offset = normalized y0 - 0.5".to_string(),
            ),
            ("s0", format!("{}", self.s0)),
            ("resolution", self.resolution.to_string()),
            ("episodes_per_cell", self.episodes_per_cell.to_string()),
            ("policies", self.policies.to_string()),
            ("config_digest", config_digest.to_string()),
        ]);
        out.push_str("a_offset,y_offset,success\n");
        for (i, row) in self.cells.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", self.a_offsets[i], self.y_offsets[j], v);
            }
        }
        out
    }
}

fn offsets(resolution: usize) -> Vec<f64> {
    (0..resolution)
        .map(|i| -SPREAD + 2.0 * SPREAD * i as f64 / (resolution - 1) as f64)
        .collect()
}

fn check_shape(resolution: usize, episodes_per_cell: usize, policies: usize) -> Result<()> {
    if resolution < 2 {
        return Err(Error::Usage("grid resolution must be at least 2".into()));
    }
    if episodes_per_cell == 0 || policies == 0 {
        return Err(Error::Usage(
            "grid needs at least one policy and one episode per cell".into(),
        ));
    }
    Ok(())
}

/// Wins of `policy` over the episodes of cell `(i, j)`. With parameter
/// noise, episode `e` of cell `c` draws parameters from episode number
/// `c * episodes + e`.
fn cell_wins<F>(
    policy: &mut F,
    env: &EnvConfig,
    resolution: usize,
    i: usize,
    j: usize,
    episodes: usize,
) -> Result<usize>
where
    F: FnMut(&Observation) -> PolicyAction,
{
    let off = offsets(resolution);
    let start = NormState::new(0.5 + off[i], 0.5 + off[j], 0.5);
    let cell = (i * resolution + j) as u64;
    let mut wins = 0;
    for e in 0..episodes {
        let mut rng = env::episode_rng(env, cell * episodes as u64 + e as u64);
        let (state, obs) = env::reset_to_norm(env, start, &mut rng);
        if env::rollout(env, state, obs, &mut *policy)?.cause == TerminalCause::Green {
            wins += 1;
        }
    }
    Ok(wins)
}

fn assemble(resolution: usize, episodes_per_cell: usize, policies: usize, wins: Vec<usize>) -> SuccessGrid {
    let denom = (policies * episodes_per_cell) as f64;
    SuccessGrid {
        resolution,
        a_offsets: offsets(resolution),
        y_offsets: offsets(resolution),
        s0: 0.5,
        episodes_per_cell,
        policies,
        cells: wins
            .chunks(resolution)
            .map(|row| row.iter().map(|w| *w as f64 / denom).collect())
            .collect(),
    }
}

/// Grid over the support of the reset distribution, each cell started from
/// its exact state and averaged over `policies`.
pub fn success_grid_with<F>(
    policies: &mut [F],
    env: &EnvConfig,
    resolution: usize,
    episodes_per_cell: usize,
) -> Result<SuccessGrid>
where
    F: FnMut(&Observation) -> PolicyAction,
{
    check_shape(resolution, episodes_per_cell, policies.len())?;
    let mut wins = vec![0; resolution * resolution];
    for (c, w) in wins.iter_mut().enumerate() {
        for policy in policies.iter_mut() {
            *w += cell_wins(
                policy,
                env,
                resolution,
                c / resolution,
                c % resolution,
                episodes_per_cell,
            )?;
        }
    }
    Ok(assemble(resolution, episodes_per_cell, policies.len(), wins))
}

/// Greedy success grid averaged over `nets` (one per seed), with cells
/// spread over up to `workers` threads. The result does not depend on
/// `workers`.
pub fn success_grid(
    nets: &[MlpWeights],
    env: &EnvConfig,
    resolution: usize,
    episodes_per_cell: usize,
    workers: usize,
) -> Result<SuccessGrid> {
    check_shape(resolution, episodes_per_cell, nets.len())?;
    for net in nets {
        check_compatible(net, env)?;
    }
    let cells = resolution * resolution;
    let next = AtomicUsize::new(0);
    let wins = Mutex::new(vec![0usize; cells]);
    let failure = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, cells) {
            scope.spawn(|| loop {
                let c = next.fetch_add(1, Ordering::Relaxed);
                if c >= cells {
                    break;
                }
                let mut total = 0;
                for net in nets {
                    let mut policy =
                        |o: &Observation| greedy_action(net, o.as_slice()).expect("observation width checked");
                    match cell_wins(
                        &mut policy,
                        env,
                        resolution,
                        c / resolution,
                        c % resolution,
                        episodes_per_cell,
                    ) {
                        Ok(w) => total += w,
                        Err(e) => {
                            failure.lock().unwrap().get_or_insert(e);
                            return;
                        }
                    }
                }
                wins.lock().unwrap()[c] = total;
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(assemble(
        resolution,
        episodes_per_cell,
        nets.len(),
        wins.into_inner().unwrap(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_two_uses_corners() {
        let mut p = [|_: &Observation| PolicyAction::Noop];
        let g = success_grid_with(&mut p, &EnvConfig::default(), 2, 1).unwrap();
        assert_eq!(g.a_offsets, vec![-0.05, 0.05]);
        assert_eq!(g.y_offsets, vec![-0.05, 0.05]);
        assert_eq!(g.cells.iter().flatten().count(), 4);
    }

    #[test]
    fn noop_grid_is_all_zero() {
        let mut p = [|_: &Observation| PolicyAction::Noop];
        let g = success_grid_with(&mut p, &EnvConfig::default(), 5, 1).unwrap();
        assert!(g.cells.iter().flatten().all(|v| *v == 0.0));
        assert!(success_grid_with(&mut p, &EnvConfig::default(), 1, 1).is_err());
    }

    #[test]
    fn worker_count_does_not_change_the_grid() {
        use crate::neural::{HeadKind, MlpSpec};
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(8);
        let nets: Vec<MlpWeights> = (0..2)
            .map(|_| MlpWeights::init(MlpSpec::new(3, HeadKind::Plain), &mut rng))
            .collect();
        let env = EnvConfig::default().with_noise(0.01);
        let one = success_grid(&nets, &env, 3, 2, 1).unwrap();
        let four = success_grid(&nets, &env, 3, 2, 4).unwrap();
        assert_eq!(one, four);
        let mut policies: Vec<_> = nets
            .iter()
            .map(|n| move |o: &Observation| greedy_action(n, o.as_slice()).unwrap())
            .collect();
        assert_eq!(success_grid_with(&mut policies, &env, 3, 2).unwrap(), one);
    }

    #[test]
    fn quadrants_exclude_the_middle_line() {
        let mut g = SuccessGrid {
            resolution: 3,
            a_offsets: offsets(3),
            y_offsets: offsets(3),
            s0: 0.5,
            episodes_per_cell: 1,
            policies: 1,
            cells: vec![vec![0.0; 3]; 3],
        };
        g.cells[0][2] = 1.0;
        g.cells[1][1] = 0.5;
        assert_eq!(g.quadrant_mean(Quadrant::LowAHighY), 1.0);
        assert_eq!(g.quadrant_mean(Quadrant::HighALowY), 0.0);
        assert_eq!(g.best_quadrant(), Quadrant::LowAHighY);
        assert_eq!(Quadrant::LowAHighY.opposite(), Quadrant::HighALowY);
        let csv = g.to_csv("d");
        assert!(csv.starts_with("# product: success_grid\n"));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 10);
    }
}
