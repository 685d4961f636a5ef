//! The AYS model: excess atmospheric carbon `A`, economic output `Y`, and
//! renewable knowledge stock `S`, coupled through the energy sector.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Physical constants of the model. Actions rewrite copies of this value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Carbon decay out of the atmosphere, years.
    pub tau_a: f64,
    /// Decay of the renewable knowledge stock, years.
    pub tau_s: f64,
    /// Economic growth rate, 1/year.
    pub beta: f64,
    /// Break-even knowledge, GJ.
    pub sigma: f64,
    /// Fossil fuel combustion efficiency, GJ/GtC.
    pub phi: f64,
    /// Energy efficiency, $/GJ.
    pub epsilon: f64,
    /// Temperature sensitivity, 1/(GtC year).
    pub theta: f64,
    /// Renewable knowledge learning exponent.
    pub rho: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            tau_a: 50.0,
            tau_s: 50.0,
            beta: 0.03,
            sigma: 4e12,
            phi: 4.7e10,
            epsilon: 147.0,
            theta: 8.57e-5,
            rho: 2.0,
        }
    }
}

impl ModelParams {
    pub const KEYS: [&'static str; 8] = ["tau_a", "tau_s", "beta", "sigma", "phi", "epsilon", "theta", "rho"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.tau_a,
            self.tau_s,
            self.beta,
            self.sigma,
            self.phi,
            self.epsilon,
            self.theta,
            self.rho,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            tau_a: v[0],
            tau_s: v[1],
            beta: v[2],
            sigma: v[3],
            phi: v[4],
            epsilon: v[5],
            theta: v[6],
            rho: v[7],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, value) in Self::KEYS.iter().zip(self.values()) {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "{key} must be finite and > 0, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Writes the parameters under `prefix` (e.g. `"model."`).
    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        for (key, value) in Self::KEYS.iter().zip(self.values()) {
            kv.set(format!("{prefix}{key}"), format_f64(value));
        }
    }

    /// Reads any keys present under `prefix`, keeping `self` for the rest.
    pub fn read_kv(mut self, kv: &KvMap, prefix: &str) -> Result<Self> {
        let mut values = self.values();
        for (slot, key) in values.iter_mut().zip(Self::KEYS) {
            let full = format!("{prefix}{key}");
            if let Some(v) = kv.get_f64(&full)? {
                *slot = v;
            }
        }
        self = Self::from_values(values);
        self.validate()?;
        Ok(self)
    }
}

/// Shortest representation that parses back to the identical `f64`.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// State in physical units: GtC, $/year, GJ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawState {
    pub a: f64,
    pub y: f64,
    pub s: f64,
}

impl RawState {
    pub const fn new(a: f64, y: f64, s: f64) -> Self {
        Self { a, y, s }
    }

    /// The present-day reference state, also the fixed normalization reference.
    pub const fn present_day() -> Self {
        Self::new(240.0, 7e13, 5e11)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.y, self.s]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("A", self.a), ("Y", self.y), ("S", self.s)] {
            if !v.is_finite() {
                return Err(Error::InvalidState(format!("{name} is not finite ({v})")));
            }
            if v < 0.0 {
                return Err(Error::InvalidState(format!("{name} is negative ({v})")));
            }
        }
        Ok(())
    }
}

/// State mapped into `[0, 1)` per component by `x / (x + reference)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub a: f64,
    pub y: f64,
    pub s: f64,
}

impl NormState {
    pub const fn new(a: f64, y: f64, s: f64) -> Self {
        Self { a, y, s }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.y, self.s]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn distance(&self, other: &NormState) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn distance_sq(&self, other: &NormState) -> f64 {
        let da = self.a - other.a;
        let dy = self.y - other.y;
        let ds = self.s - other.s;
        da * da + dy * dy + ds * ds
    }
}

/// Energy-sector intermediates of one derivative evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxBreakdown {
    /// Fossil share of energy demand.
    pub gamma: f64,
    /// Energy demand, GJ/year.
    pub demand: f64,
    /// Renewable energy, GJ/year.
    pub renewable: f64,
    /// Fossil energy, GJ/year.
    pub fossil: f64,
    /// Emissions, GtC/year.
    pub emissions: f64,
}

/// Time derivatives of the raw state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub da: f64,
    pub dy: f64,
    pub ds: f64,
}

impl Rates {
    pub fn to_array(self) -> [f64; 3] {
        [self.da, self.dy, self.ds]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoints {
    pub black: RawState,
    pub green_norm: NormState,
}

/// The four policy levers, encoded 0..3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyAction {
    Noop = 0,
    EnergyTransition = 1,
    DeGrowth = 2,
    EnergyTransitionDeGrowth = 3,
}

impl PolicyAction {
    pub const ALL: [PolicyAction; 4] = [
        PolicyAction::Noop,
        PolicyAction::EnergyTransition,
        PolicyAction::DeGrowth,
        PolicyAction::EnergyTransitionDeGrowth,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Usage(format!("action code {i} is not in 0..4")))
    }

    pub fn label(self) -> &'static str {
        match self {
            PolicyAction::Noop => "NOOP",
            PolicyAction::EnergyTransition => "ET",
            PolicyAction::DeGrowth => "DG",
            PolicyAction::EnergyTransitionDeGrowth => "ET_DG",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('+', "_").as_str() {
            "NOOP" => Ok(PolicyAction::Noop),
            "ET" => Ok(PolicyAction::EnergyTransition),
            "DG" => Ok(PolicyAction::DeGrowth),
            "ET_DG" | "DG_ET" => Ok(PolicyAction::EnergyTransitionDeGrowth),
            other => Err(Error::Usage(format!("unknown action `{other}`"))),
        }
    }

    pub fn has_energy_transition(self) -> bool {
        matches!(
            self,
            PolicyAction::EnergyTransition | PolicyAction::EnergyTransitionDeGrowth
        )
    }

    pub fn has_degrowth(self) -> bool {
        matches!(self, PolicyAction::DeGrowth | PolicyAction::EnergyTransitionDeGrowth)
    }
}

impl fmt::Display for PolicyAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

fn check_finite(state: &RawState) -> Result<()> {
    for (name, v) in [("A", state.a), ("Y", state.y), ("S", state.s)] {
        if !v.is_finite() {
            return Err(Error::InvalidState(format!("{name} is not finite ({v})")));
        }
    }
    Ok(())
}

/// Energy-sector intermediates. `S = 0` short-circuits to a fossil share of 1.
pub fn flux(state: &RawState, params: &ModelParams) -> Result<FluxBreakdown> {
    check_finite(state)?;
    let gamma = if state.s == 0.0 {
        1.0
    } else {
        1.0 / (1.0 + (state.s / params.sigma).powf(params.rho))
    };
    let demand = state.y / params.epsilon;
    let fossil = gamma * demand;
    let renewable = (1.0 - gamma) * demand;
    let emissions = fossil / params.phi;
    Ok(FluxBreakdown {
        gamma,
        demand,
        renewable,
        fossil,
        emissions,
    })
}

pub fn derivatives(state: &RawState, params: &ModelParams) -> Result<Rates> {
    let f = flux(state, params)?;
    Ok(Rates {
        da: f.emissions - state.a / params.tau_a,
        dy: params.beta * state.y - params.theta * state.a * state.y,
        ds: f.renewable - state.s / params.tau_s,
    })
}

/// Parameters in force for one year under `action`. `base` is left untouched.
pub fn effective_params(base: &ModelParams, action: PolicyAction) -> ModelParams {
    let mut p = *base;
    if action.has_energy_transition() {
        p.sigma = base.sigma / base.rho.sqrt();
    }
    if action.has_degrowth() {
        p.beta = base.beta / 2.0;
    }
    p
}

fn offset(state: &RawState, k: &Rates, h: f64) -> RawState {
    RawState::new(state.a + h * k.da, state.y + h * k.dy, state.s + h * k.ds)
}

fn stage(state: &RawState, params: &ModelParams, stage: usize) -> Result<Rates> {
    let k = derivatives(state, params).map_err(|e| Error::IntegrationFailure {
        stage,
        detail: e.to_string(),
    })?;
    if k.to_array().iter().all(|v| v.is_finite()) {
        Ok(k)
    } else {
        Err(Error::IntegrationFailure {
            stage,
            detail: format!("non-finite derivative {k:?}"),
        })
    }
}

/// One classical RK4 step of length `h` years, clamped to the non-negative orthant.
pub fn rk4_step(state: &RawState, params: &ModelParams, h: f64) -> Result<RawState> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!("step size must be > 0, got {h}")));
    }
    let k1 = stage(state, params, 1)?;
    let k2 = stage(&offset(state, &k1, h / 2.0), params, 2)?;
    let k3 = stage(&offset(state, &k2, h / 2.0), params, 3)?;
    let k4 = stage(&offset(state, &k3, h), params, 4)?;
    let combine = |x: f64, a: f64, b: f64, c: f64, d: f64| (x + h / 6.0 * (a + 2.0 * b + 2.0 * c + d)).max(0.0);
    let next = RawState::new(
        combine(state.a, k1.da, k2.da, k3.da, k4.da),
        combine(state.y, k1.dy, k2.dy, k3.dy, k4.dy),
        combine(state.s, k1.ds, k2.ds, k3.ds, k4.ds),
    );
    if next.to_array().iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationFailure {
            stage: 4,
            detail: format!("non-finite update {next:?}"),
        })
    }
}

/// Advances one year with `substeps` equal RK4 steps.
pub fn integrate_year(state: &RawState, params: &ModelParams, substeps: usize) -> Result<RawState> {
    integrate(state, params, 1.0, substeps)
}

/// Advances `duration` years with `substeps` equal RK4 steps.
pub fn integrate(state: &RawState, params: &ModelParams, duration: f64, substeps: usize) -> Result<RawState> {
    if substeps == 0 {
        return Err(Error::Usage("substeps must be >= 1".into()));
    }
    let h = duration / substeps as f64;
    let mut s = *state;
    for _ in 0..substeps {
        s = rk4_step(&s, params, h)?;
    }
    Ok(s)
}

pub fn normalize(state: &RawState, reference: &RawState) -> NormState {
    let n = |x: f64, r: f64| x / (x + r);
    NormState::new(
        n(state.a, reference.a),
        n(state.y, reference.y),
        n(state.s, reference.s),
    )
}

pub fn denormalize(norm: &NormState, reference: &RawState) -> Result<RawState> {
    let d = |component: &'static str, x: f64, r: f64| {
        if x >= 1.0 || !x.is_finite() || x < 0.0 {
            Err(Error::Unrepresentable { component, value: x })
        } else {
            Ok(r * x / (1.0 - x))
        }
    };
    Ok(RawState::new(
        d("a", norm.a, reference.a)?,
        d("y", norm.y, reference.y)?,
        d("s", norm.s, reference.s)?,
    ))
}

/// Per-component derivative of the normalization map, `ref / (x + ref)^2`.
pub fn normalization_jacobian(state: &RawState, reference: &RawState) -> [f64; 3] {
    let j = |x: f64, r: f64| r / ((x + r) * (x + r));
    [
        j(state.a, reference.a),
        j(state.y, reference.y),
        j(state.s, reference.s),
    ]
}

pub fn fixed_points(params: &ModelParams) -> FixedPoints {
    FixedPoints {
        black: RawState::new(
            params.beta / params.theta,
            params.phi * params.beta * params.epsilon / (params.theta * params.tau_a),
            0.0,
        ),
        green_norm: NormState::new(0.0, 1.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S0: RawState = RawState::present_day();

    fn rel(a: f64, b: f64) -> f64 {
        if a == b {
            0.0
        } else {
            (a - b).abs() / a.abs().max(b.abs())
        }
    }

    #[test]
    fn defaults_match_parameter_table() {
        let p = ModelParams::default();
        assert_eq!(p.values(), [50.0, 50.0, 0.03, 4e12, 4.7e10, 147.0, 8.57e-5, 2.0]);
        p.validate().unwrap();
    }

    #[test]
    fn break_even_knowledge_gives_half_share() {
        let p = ModelParams::default();
        let f = flux(&RawState::new(240.0, 7e13, p.sigma), &p).unwrap();
        assert!((f.gamma - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_knowledge_is_all_fossil() {
        let f = flux(&RawState::new(240.0, 7e13, 0.0), &ModelParams::default()).unwrap();
        assert_eq!(f.gamma, 1.0);
        assert_eq!(f.renewable, 0.0);
    }

    #[test]
    fn flux_at_present_day() {
        // Hand evaluation: U = 7e13/147, Γ = 1/(1 + (5e11/4e12)^2) = 1/1.015625.
        let f = flux(&S0, &ModelParams::default()).unwrap();
        assert!(rel(f.demand, 4.761_904_761_904_762e11) < 1e-12);
        assert!(rel(f.gamma, 0.984_615_384_615_384_6) < 1e-12);
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let err = flux(&RawState::new(f64::NAN, 1.0, 1.0), &ModelParams::default());
        assert!(matches!(err, Err(Error::InvalidState(_))));
    }

    #[test]
    fn derivatives_at_present_day() {
        // Reference values from an external float64 evaluation of the three equations.
        let r = derivatives(&S0, &ModelParams::default()).unwrap();
        assert!(rel(r.da, 5.175_839_76) < 1e-8, "{r:?}");
        assert!(rel(r.dy, 6.602_4e11) < 1e-8, "{r:?}");
        assert!(rel(r.ds, -2.673_992_67e9) < 1e-8, "{r:?}");
    }

    #[test]
    fn zero_output_economy() {
        let r = derivatives(&RawState::new(300.0, 0.0, 1e12), &ModelParams::default()).unwrap();
        assert_eq!(r.dy, 0.0);
        assert_eq!(r.ds, -1e12 / 50.0);
    }

    #[test]
    fn black_point_is_stationary() {
        let p = ModelParams::default();
        let fp = fixed_points(&p);
        assert!(rel(fp.black.a, 350.0) < 5e-3);
        assert!(rel(fp.black.y, 4.84e13) < 5e-3);
        assert_eq!(fp.black.s, 0.0);
        let r = derivatives(&fp.black, &p).unwrap();
        assert!(r.da.abs() < 1e-6 * fp.black.a);
        assert!(r.dy.abs() < 1e-6 * fp.black.y);
        assert_eq!(r.ds, 0.0);
        assert_eq!(fp.green_norm, NormState::new(0.0, 1.0, 1.0));
    }

    #[test]
    fn doubling_beta_doubles_black_carbon() {
        let p = ModelParams::default();
        let q = ModelParams {
            beta: 2.0 * p.beta,
            ..p
        };
        assert!(rel(fixed_points(&q).black.a, 2.0 * fixed_points(&p).black.a) < 1e-15);
    }

    #[test]
    fn action_parameter_changes() {
        let p = ModelParams::default();
        assert_eq!(effective_params(&p, PolicyAction::Noop), p);
        let et = effective_params(&p, PolicyAction::EnergyTransition);
        assert!(rel(et.sigma, 2.828_427_124_746_19e12) < 1e-12);
        assert_eq!(et.beta, p.beta);
        let dg = effective_params(&p, PolicyAction::DeGrowth);
        assert_eq!(dg.beta, 0.015);
        assert_eq!(dg.sigma, p.sigma);
        let both = effective_params(&p, PolicyAction::EnergyTransitionDeGrowth);
        assert_eq!(both.beta, 0.015);
        assert_eq!(both.sigma, et.sigma);
        assert_eq!(p, ModelParams::default());
    }

    #[test]
    fn action_codes_are_stable() {
        for (i, a) in PolicyAction::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(PolicyAction::from_index(i).unwrap(), *a);
            assert_eq!(PolicyAction::from_label(a.label()).unwrap(), *a);
        }
        assert!(PolicyAction::from_index(4).is_err());
    }

    #[test]
    fn equilibrium_is_preserved_by_rk4() {
        let p = ModelParams::default();
        let black = fixed_points(&p).black;
        let next = rk4_step(&black, &p, 0.1).unwrap();
        assert!(rel(next.a, black.a) < 1e-12);
        assert!(rel(next.y, black.y) < 1e-12);
        assert_eq!(next.s, 0.0);
        let year = integrate_year(&black, &p, 10).unwrap();
        assert!(rel(year.a, black.a) < 1e-12 && rel(year.y, black.y) < 1e-12);
    }

    #[test]
    fn rk4_step_halving() {
        let p = ModelParams::default();
        let one = rk4_step(&S0, &p, 0.1).unwrap();
        let two = rk4_step(&rk4_step(&S0, &p, 0.05).unwrap(), &p, 0.05).unwrap();
        for (x, y) in one.to_array().iter().zip(two.to_array()) {
            assert!(rel(*x, y) < 1e-6);
        }
    }

    #[test]
    fn single_year_step_against_fine_reference() {
        let p = ModelParams::default();
        let coarse = rk4_step(&S0, &p, 1.0).unwrap();
        let fine = integrate(&S0, &p, 1.0, 1000).unwrap();
        for (x, y) in coarse.to_array().iter().zip(fine.to_array()) {
            assert!(rel(*x, y) < 1e-5);
        }
    }

    #[test]
    fn one_year_of_business_as_usual_direction() {
        let p = ModelParams::default();
        let next = integrate_year(&S0, &p, 10).unwrap();
        assert!(next.a > S0.a && next.y > S0.y && next.s < S0.s);
        let refined = integrate_year(&S0, &p, 100).unwrap();
        for (x, y) in next.to_array().iter().zip(refined.to_array()) {
            assert!(rel(*x, y) < 1e-6);
        }
    }

    #[test]
    fn rk4_rejects_bad_step() {
        let p = ModelParams::default();
        assert!(rk4_step(&S0, &p, 0.0).is_err());
        assert!(integrate_year(&S0, &p, 0).is_err());
    }

    #[test]
    fn rk4_reports_failing_stage() {
        let p = ModelParams {
            rho: 1e300,
            ..Default::default()
        };
        let huge = RawState::new(f64::MAX, f64::MAX, 1e300);
        match rk4_step(&huge, &p, 1.0) {
            Err(Error::IntegrationFailure { stage, .. }) => assert!((1..=4).contains(&stage)),
            other => panic!("expected integration failure, got {other:?}"),
        }
    }

    #[test]
    fn normalization_reference_points() {
        assert_eq!(normalize(&S0, &S0), NormState::new(0.5, 0.5, 0.5));
        assert_eq!(
            normalize(&RawState::new(0.0, 0.0, 0.0), &S0),
            NormState::new(0.0, 0.0, 0.0)
        );
        let a_pb = normalize(&RawState::new(600.0, 7e13, 5e11), &S0).a;
        assert!((a_pb - 600.0 / 840.0).abs() < 1e-15);
        assert!((a_pb - 0.714_29).abs() < 1e-5);
    }

    #[test]
    fn denormalize_rejects_one() {
        let err = denormalize(&NormState::new(0.5, 1.0, 0.5), &S0);
        assert!(matches!(err, Err(Error::Unrepresentable { component: "y", .. })));
    }

    #[test]
    fn params_kv_round_trip() {
        let mut kv = KvMap::default();
        let p = effective_params(&ModelParams::default(), PolicyAction::EnergyTransition);
        p.write_kv(&mut kv, "model.");
        let back = ModelParams::default().read_kv(&kv, "model.").unwrap();
        assert_eq!(back, p);
    }
}
