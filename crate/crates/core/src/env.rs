//! Episodic decision process over the AYS dynamics: one action per simulated year.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    self, derivatives, effective_params, fixed_points, integrate_year, normalization_jacobian, normalize, NormState,
    PolicyAction, RawState,
};
use crate::dynamics::{format_f64, ModelParams};
use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Normalization reference, frozen at the present-day state.
pub const REFERENCE: RawState = RawState::present_day();

/// Planetary boundaries in raw units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boundaries {
    pub a_pb: f64,
    pub y_pb: f64,
    pub s_pb: f64,
}

impl Default for Boundaries {
    fn default() -> Self {
        Self::PLANETARY
    }
}

impl Boundaries {
    pub const PLANETARY: Boundaries = Boundaries {
        a_pb: 600.0,
        y_pb: 4e13,
        s_pb: 0.0,
    };

    pub fn violated(&self, raw: &RawState) -> bool {
        raw.a > self.a_pb || raw.y < self.y_pb || raw.s < self.s_pb
    }

    pub fn normalized(&self) -> NormState {
        normalize(&RawState::new(self.a_pb, self.y_pb, self.s_pb), &REFERENCE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardKind {
    Pb,
    Pc,
    Sparse,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Pb => "pb",
            RewardKind::Pc => "pc",
            RewardKind::Sparse => "sparse",
        }
    }
}

impl FromStr for RewardKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pb" => Ok(RewardKind::Pb),
            "pc" => Ok(RewardKind::Pc),
            "sparse" => Ok(RewardKind::Sparse),
            other => Err(format!("expected one of pb, pc, sparse; got `{other}`")),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observability {
    /// Normalized `(a, y, s)`.
    Partial,
    /// Normalized `(a, y, s)` followed by their per-year velocities.
    Markov,
}

impl Observability {
    pub fn dim(self) -> usize {
        match self {
            Observability::Partial => 3,
            Observability::Markov => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Observability::Partial => "partial",
            Observability::Markov => "markov",
        }
    }

    pub fn from_dim(dim: usize) -> Option<Self> {
        match dim {
            3 => Some(Observability::Partial),
            6 => Some(Observability::Markov),
            _ => None,
        }
    }
}

impl FromStr for Observability {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "partial" => Ok(Observability::Partial),
            "markov" => Ok(Observability::Markov),
            other => Err(format!("expected one of partial, markov; got `{other}`")),
        }
    }
}

impl fmt::Display for Observability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub reward_kind: RewardKind,
    pub observability: Observability,
    /// Relative standard deviation of the per-episode parameter noise.
    pub param_noise_std: f64,
    pub max_steps: usize,
    pub goal_tol: f64,
    pub black_tol: f64,
    pub substeps: usize,
    pub seed: u64,
    pub params: ModelParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            reward_kind: RewardKind::Pb,
            observability: Observability::Partial,
            param_noise_std: 0.0,
            max_steps: 600,
            goal_tol: 0.05,
            black_tol: 0.05,
            substeps: 10,
            seed: 0,
            params: ModelParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn with_reward(mut self, kind: RewardKind) -> Self {
        self.reward_kind = kind;
        self
    }

    pub fn with_observability(mut self, obs: Observability) -> Self {
        self.observability = obs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, std: f64) -> Self {
        self.param_noise_std = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let tol_ok = |v: f64| v > 0.0 && v <= 0.2;
        if !tol_ok(self.goal_tol) {
            return Err(Error::config("env.goal_tol", "must lie in (0, 0.2]"));
        }
        if !tol_ok(self.black_tol) {
            return Err(Error::config("env.black_tol", "must lie in (0, 0.2]"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("env.max_steps", "must be >= 1"));
        }
        if self.substeps == 0 {
            return Err(Error::config("env.substeps", "must be >= 1"));
        }
        if !(self.param_noise_std >= 0.0 && self.param_noise_std.is_finite()) {
            return Err(Error::config("env.param_noise_std", "must be finite and >= 0"));
        }
        self.params
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("env.reward", self.reward_kind);
        kv.set("env.observability", self.observability);
        kv.set("env.param_noise_std", format_f64(self.param_noise_std));
        kv.set("env.max_steps", self.max_steps);
        kv.set("env.goal_tol", format_f64(self.goal_tol));
        kv.set("env.black_tol", format_f64(self.black_tol));
        kv.set("env.substeps", self.substeps);
        kv.set("env.seed", self.seed);
        self.params.write_kv(kv, "model.");
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.write_kv(&mut kv);
        kv
    }

    /// Reads `env.*` and `model.*` keys over the defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            reward_kind: kv.get_parsed("env.reward")?.unwrap_or(d.reward_kind),
            observability: kv.get_parsed("env.observability")?.unwrap_or(d.observability),
            param_noise_std: kv.get_parsed("env.param_noise_std")?.unwrap_or(d.param_noise_std),
            max_steps: kv.get_parsed("env.max_steps")?.unwrap_or(d.max_steps),
            goal_tol: kv.get_parsed("env.goal_tol")?.unwrap_or(d.goal_tol),
            black_tol: kv.get_parsed("env.black_tol")?.unwrap_or(d.black_tol),
            substeps: kv.get_parsed("env.substeps")?.unwrap_or(d.substeps),
            seed: kv.get_parsed("env.seed")?.unwrap_or(d.seed),
            params: d.params.read_kv(kv, "model.")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: Vec<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminalCause {
    None,
    Green,
    Black,
    Boundary,
    Timeout,
}

impl TerminalCause {
    pub const TERMINAL: [TerminalCause; 4] = [
        TerminalCause::Green,
        TerminalCause::Black,
        TerminalCause::Boundary,
        TerminalCause::Timeout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerminalCause::None => "none",
            TerminalCause::Green => "green",
            TerminalCause::Black => "black",
            TerminalCause::Boundary => "boundary",
            TerminalCause::Timeout => "timeout",
        }
    }

    pub fn is_terminal(self) -> bool {
        self != TerminalCause::None
    }
}

impl FromStr for TerminalCause {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(TerminalCause::None),
            "green" => Ok(TerminalCause::Green),
            "black" => Ok(TerminalCause::Black),
            "boundary" => Ok(TerminalCause::Boundary),
            "timeout" => Ok(TerminalCause::Timeout),
            other => Err(format!("unknown terminal cause `{other}`")),
        }
    }
}

impl fmt::Display for TerminalCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub t: usize,
    pub raw: RawState,
    pub norm: NormState,
    pub action: PolicyAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub cause: TerminalCause,
    pub info: StepInfo,
}

/// Mutable state of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeState {
    pub raw: RawState,
    /// Parameters drawn for this episode, before any action is applied.
    pub params: ModelParams,
    pub t: usize,
    pub done: bool,
    /// Action whose parameters drive the reported velocities.
    pub last_action: PolicyAction,
}

impl EpisodeState {
    pub fn norm(&self) -> NormState {
        normalize(&self.raw, &REFERENCE)
    }
}

/// Seed for the reset draw of one episode.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    // splitmix64 of the pair keeps neighbouring episodes decorrelated.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(episode)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn episode_rng(config: &EnvConfig, episode: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(episode_seed(config.seed, episode))
}

fn sample_params<R: Rng + ?Sized>(base: &ModelParams, std: f64, rng: &mut R) -> ModelParams {
    if std == 0.0 {
        return *base;
    }
    let normal = Normal::new(0.0, std).expect("validated noise std");
    loop {
        let mut v = base.values();
        for x in v.iter_mut() {
            *x *= 1.0 + normal.sample(rng);
        }
        if v.iter().all(|x| *x > 0.0) {
            return ModelParams::from_values(v);
        }
    }
}

/// Starts an episode from the randomized present-day distribution.
pub fn reset<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> (EpisodeState, Observation) {
    let a = 0.5 + rng.random_range(-0.05..0.05);
    let y = 0.5 + rng.random_range(-0.05..0.05);
    let start = NormState::new(a, y, 0.5);
    reset_to_norm(config, start, rng)
}

/// Starts an episode at a given normalized state; parameter noise is still drawn from `rng`.
pub fn reset_to_norm<R: Rng + ?Sized>(
    config: &EnvConfig,
    start: NormState,
    rng: &mut R,
) -> (EpisodeState, Observation) {
    let raw = dynamics::denormalize(&start, &REFERENCE).expect("start inside [0, 1)");
    let params = sample_params(&config.params, config.param_noise_std, rng);
    let state = EpisodeState {
        raw,
        params,
        t: 0,
        done: false,
        last_action: PolicyAction::Noop,
    };
    let obs = observe(&state, config);
    (state, obs)
}

/// Reset for episode number `episode` of `config.seed`.
pub fn reset_episode(config: &EnvConfig, episode: u64) -> (EpisodeState, Observation) {
    let mut rng = episode_rng(config, episode);
    reset(config, &mut rng)
}

pub fn reward_pb(norm: &NormState, boundaries: &Boundaries) -> f64 {
    norm.distance_sq(&boundaries.normalized())
}

pub fn pc_multiplier(action: PolicyAction) -> f64 {
    match action {
        PolicyAction::Noop => 1.0,
        PolicyAction::EnergyTransition | PolicyAction::DeGrowth => 0.5,
        PolicyAction::EnergyTransitionDeGrowth => 0.25,
    }
}

pub fn reward_pc(norm: &NormState, action: PolicyAction, boundaries: &Boundaries) -> f64 {
    pc_multiplier(action) * reward_pb(norm, boundaries)
}

/// Terminal-only signal. Reaching the black attractor counts as a failure.
pub fn reward_sparse(cause: TerminalCause) -> f64 {
    match cause {
        TerminalCause::Green => 1.0,
        TerminalCause::Boundary | TerminalCause::Black => -1.0,
        TerminalCause::None | TerminalCause::Timeout => 0.0,
    }
}

/// Termination with precedence boundary > green > black > timeout.
pub fn terminal_check(
    norm: &NormState,
    raw: &RawState,
    t: usize,
    black_norm: &NormState,
    config: &EnvConfig,
) -> TerminalCause {
    if Boundaries::PLANETARY.violated(raw) {
        TerminalCause::Boundary
    } else if norm.distance(&NormState::new(0.0, 1.0, 1.0)) < config.goal_tol {
        TerminalCause::Green
    } else if norm.distance(black_norm) < config.black_tol {
        TerminalCause::Black
    } else if t >= config.max_steps {
        TerminalCause::Timeout
    } else {
        TerminalCause::None
    }
}

/// Normalized black attractor of an episode's parameters.
pub fn black_norm(params: &ModelParams) -> NormState {
    normalize(&fixed_points(params).black, &REFERENCE)
}

/// Per-year velocity of the normalized state under `params`.
pub fn normalized_velocity(raw: &RawState, params: &ModelParams) -> [f64; 3] {
    let rates = derivatives(raw, params).map(|r| r.to_array()).unwrap_or([0.0; 3]);
    let jac = normalization_jacobian(raw, &REFERENCE);
    [jac[0] * rates[0], jac[1] * rates[1], jac[2] * rates[2]]
}

pub fn observe(state: &EpisodeState, config: &EnvConfig) -> Observation {
    let norm = state.norm();
    let mut values = Vec::with_capacity(config.observability.dim());
    values.extend_from_slice(&norm.to_array());
    if config.observability == Observability::Markov {
        let params = effective_params(&state.params, state.last_action);
        values.extend_from_slice(&normalized_velocity(&state.raw, &params));
    }
    Observation { values }
}

/// Advances one year under `action`.
pub fn step(state: &EpisodeState, action: PolicyAction, config: &EnvConfig) -> Result<(EpisodeState, StepOutcome)> {
    if state.done {
        return Err(Error::Usage("episode finished".into()));
    }
    let params = effective_params(&state.params, action);
    let raw = integrate_year(&state.raw, &params, config.substeps)?;
    let t = state.t + 1;
    let norm = normalize(&raw, &REFERENCE);
    let cause = terminal_check(&norm, &raw, t, &black_norm(&state.params), config);
    let boundaries = Boundaries::PLANETARY;
    let reward = match (config.reward_kind, cause) {
        (RewardKind::Sparse, cause) => reward_sparse(cause),
        (_, TerminalCause::Boundary) => 0.0,
        (RewardKind::Pb, _) => reward_pb(&norm, &boundaries),
        (RewardKind::Pc, _) => reward_pc(&norm, action, &boundaries),
    };
    let next = EpisodeState {
        raw,
        params: state.params,
        t,
        done: cause.is_terminal(),
        last_action: action,
    };
    let obs = observe(&next, config);
    let outcome = StepOutcome {
        obs,
        reward,
        done: next.done,
        cause,
        info: StepInfo { t, raw, norm, action },
    };
    Ok((next, outcome))
}

/// One line of an exported trajectory. The initial state has no action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub action: Option<PolicyAction>,
    #[serde(rename = "A")]
    pub raw_a: f64,
    #[serde(rename = "Y")]
    pub raw_y: f64,
    #[serde(rename = "S")]
    pub raw_s: f64,
    pub a: f64,
    pub y: f64,
    pub s: f64,
    pub reward: f64,
    pub cause: TerminalCause,
}

impl TrajectoryRecord {
    pub fn initial(state: &EpisodeState) -> Self {
        let norm = state.norm();
        Self {
            t: state.t,
            action: None,
            raw_a: state.raw.a,
            raw_y: state.raw.y,
            raw_s: state.raw.s,
            a: norm.a,
            y: norm.y,
            s: norm.s,
            reward: 0.0,
            cause: TerminalCause::None,
        }
    }

    pub fn from_outcome(outcome: &StepOutcome) -> Self {
        let i = &outcome.info;
        Self {
            t: i.t,
            action: Some(i.action),
            raw_a: i.raw.a,
            raw_y: i.raw.y,
            raw_s: i.raw.s,
            a: i.norm.a,
            y: i.norm.y,
            s: i.norm.s,
            reward: outcome.reward,
            cause: outcome.cause,
        }
    }

    pub fn norm(&self) -> NormState {
        NormState::new(self.a, self.y, self.s)
    }
}

/// A finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub records: Vec<TrajectoryRecord>,
    pub cause: TerminalCause,
    pub total_reward: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.records.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn actions(&self) -> impl Iterator<Item = PolicyAction> + '_ {
        self.records.iter().filter_map(|r| r.action)
    }
}

/// Runs `policy` from `state` until the episode terminates.
pub fn rollout<F>(config: &EnvConfig, mut state: EpisodeState, mut obs: Observation, mut policy: F) -> Result<Episode>
where
    F: FnMut(&Observation) -> PolicyAction,
{
    let mut records = vec![TrajectoryRecord::initial(&state)];
    let mut total_reward = 0.0;
    loop {
        let action = policy(&obs);
        let (next, outcome) = step(&state, action, config)?;
        total_reward += outcome.reward;
        records.push(TrajectoryRecord::from_outcome(&outcome));
        if outcome.done {
            return Ok(Episode {
                records,
                cause: outcome.cause,
                total_reward,
            });
        }
        state = next;
        obs = outcome.obs;
    }
}
