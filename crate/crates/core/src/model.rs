//! Extended Bergman minimal model and its fixed-step RK4 simulation.
//!
//! State: plasma glucose `G` (mg/dL), remote insulin action `X` (1/min), plasma
//! insulin `I` (µU/mL) and two gut compartments `Q1`, `Q2` (mg carbohydrate).
//!
//! ```text
//! dG/dt  = -(p1·(1 + alpha_ex·e(t)) + X)·G + p1·Gb + f_bio·k_abs·Q2 / Vg
//! dX/dt  = -p2·X + p3·(I - Ib)
//! dI/dt  = -n·I + u / (1000·Vi)
//! dQ1/dt = -k_emp·Q1
//! dQ2/dt =  k_emp·Q1 - k_abs·Q2
//! ```
//!
//! `u` is the pump rate in µU/min and `Vi` is in litres, so `u / (1000·Vi)` is in
//! µU/mL/min. The insulin balance holds `I = Ib` exactly when
//! `u = 1000·n·Ib·Vi` ([`PatientParams::equilibrium_insulin_rate`]). Boluses and
//! meals enter as impulses on `I` and `Q1`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::plan::{bolus_dose, ActionKind, UsagePlan};
use crate::scenario::{InitialCondition, Scenario};
use crate::text::Violations;

/// µU per U.
pub const MICRO_UNITS_PER_UNIT: f64 = 1.0e6;
/// mg per g of carbohydrate.
pub const MG_PER_G: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TwinError {
    #[error("invalid state: `{component}` is not finite")]
    InvalidState { component: &'static str },
    #[error("simulation diverged at t={t} min: `{component}` became {value}")]
    Divergence { component: &'static str, t: f64, value: f64 },
    #[error("plan does not cover t={t} min")]
    PlanCoverage { t: f64 },
    #[error("invalid patient parameters: {0}")]
    InvalidParams(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(Violations),
    #[error("invalid scenario: {0}")]
    InvalidScenario(Violations),
    #[error("invalid simulation settings: {0}")]
    InvalidConfig(String),
}

/// Patient-specific parameter vector of the twin.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatientParams {
    /// Glucose effectiveness `p1` (1/min).
    pub p1: f64,
    /// Remote insulin action decay `p2` (1/min).
    pub p2: f64,
    /// Insulin action gain `p3` (1/min per µU/mL, per min).
    pub p3: f64,
    /// Plasma insulin clearance `n` (1/min).
    pub n: f64,
    /// Basal glucose (mg/dL).
    pub gb: f64,
    /// Basal plasma insulin (µU/mL).
    pub ib: f64,
    /// Insulin distribution volume (L).
    pub vi: f64,
    /// Glucose distribution volume (dL).
    pub vg: f64,
    /// Gastric emptying rate (1/min).
    pub k_emp: f64,
    /// Gut absorption rate (1/min).
    pub k_abs: f64,
    /// Carbohydrate bioavailability, `(0, 1]`.
    pub f_bio: f64,
    /// Exercise uptake gain, `>= 0`.
    pub alpha_ex: f64,
}

impl PatientParams {
    /// Literature-style adult profile used as the default twin.
    pub const NOMINAL_ADULT: PatientParams = PatientParams {
        p1: 0.015,
        p2: 0.02,
        p3: 1.0e-5,
        n: 0.0926,
        gb: 120.0,
        ib: 15.0,
        vi: 12.0,
        vg: 130.0,
        k_emp: 0.05,
        k_abs: 0.04,
        f_bio: 0.9,
        alpha_ex: 2.0,
    };

    pub fn validate(&self) -> Result<(), TwinError> {
        let positive = [
            ("p1", self.p1),
            ("p2", self.p2),
            ("p3", self.p3),
            ("n", self.n),
            ("vi", self.vi),
            ("vg", self.vg),
            ("k_emp", self.k_emp),
            ("k_abs", self.k_abs),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TwinError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.f_bio > 0.0 && self.f_bio <= 1.0) {
            return Err(TwinError::InvalidParams(format!("f_bio must be in (0, 1], got {}", self.f_bio)));
        }
        if !(self.alpha_ex.is_finite() && self.alpha_ex >= 0.0) {
            return Err(TwinError::InvalidParams(format!("alpha_ex must be >= 0, got {}", self.alpha_ex)));
        }
        if !(50.0..=300.0).contains(&self.gb) {
            return Err(TwinError::InvalidParams(format!("gb must be in [50, 300], got {}", self.gb)));
        }
        if !(self.ib > 0.0 && self.ib <= 100.0) {
            return Err(TwinError::InvalidParams(format!("ib must be in (0, 100], got {}", self.ib)));
        }
        Ok(())
    }

    /// Pump rate (µU/min) that holds plasma insulin at `ib`.
    pub fn equilibrium_insulin_rate(&self) -> f64 {
        1000.0 * self.n * self.ib * self.vi
    }

    /// [`Self::equilibrium_insulin_rate`] expressed in U/h.
    pub fn equilibrium_basal(&self) -> f64 {
        self.equilibrium_insulin_rate() * 60.0 / MICRO_UNITS_PER_UNIT
    }

    pub fn equilibrium_state(&self) -> TwinState {
        TwinState { glucose: self.gb, insulin_action: 0.0, insulin: self.ib, gut1: 0.0, gut2: 0.0, t: 0.0 }
    }

    /// Plasma insulin rise (µU/mL) produced by an instantaneous bolus.
    pub fn bolus_concentration(&self, units: f64) -> f64 {
        units * MICRO_UNITS_PER_UNIT / (1000.0 * self.vi)
    }
}

impl Default for PatientParams {
    fn default() -> Self {
        Self::NOMINAL_ADULT
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TwinState {
    /// Plasma glucose `G` (mg/dL).
    pub glucose: f64,
    /// Remote insulin action `X` (1/min).
    pub insulin_action: f64,
    /// Plasma insulin `I` (µU/mL).
    pub insulin: f64,
    /// Gut compartment 1 (mg).
    pub gut1: f64,
    /// Gut compartment 2 (mg).
    pub gut2: f64,
    /// min
    pub t: f64,
}

impl TwinState {
    const NAMES: [&'static str; 5] = ["glucose", "insulin_action", "insulin", "gut1", "gut2"];

    fn to_array(self) -> [f64; 5] {
        [self.glucose, self.insulin_action, self.insulin, self.gut1, self.gut2]
    }

    fn from_array(y: [f64; 5], t: f64) -> Self {
        Self { glucose: y[0], insulin_action: y[1], insulin: y[2], gut1: y[3], gut2: y[4], t }
    }

    fn check_finite(&self) -> Result<(), TwinError> {
        for (name, v) in Self::NAMES.iter().zip(self.to_array()) {
            if !v.is_finite() {
                return Err(TwinError::InvalidState { component: name });
            }
        }
        if !self.t.is_finite() {
            return Err(TwinError::InvalidState { component: "t" });
        }
        Ok(())
    }
}

/// Time derivative of the continuous part of [`TwinState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub glucose: f64,
    pub insulin_action: f64,
    pub insulin: f64,
    pub gut1: f64,
    pub gut2: f64,
}

#[inline]
fn rhs(y: &[f64; 5], p: &PatientParams, u: f64, intensity: f64) -> [f64; 5] {
    let [g, x, i, q1, q2] = *y;
    [
        -(p.p1 * (1.0 + p.alpha_ex * intensity) + x) * g + p.p1 * p.gb + p.f_bio * p.k_abs * q2 / p.vg,
        -p.p2 * x + p.p3 * (i - p.ib),
        -p.n * i + u / (1000.0 * p.vi),
        -p.k_emp * q1,
        p.k_emp * q1 - p.k_abs * q2,
    ]
}

/// Right-hand side of the twin ODE with pump rate `u_insulin` (µU/min) and
/// exercise effort `exercise_intensity` held fixed.
pub fn derivatives(
    state: &TwinState,
    params: &PatientParams,
    u_insulin: f64,
    exercise_intensity: f64,
) -> Result<StateDerivative, TwinError> {
    state.check_finite()?;
    if !u_insulin.is_finite() {
        return Err(TwinError::InvalidState { component: "u_insulin" });
    }
    if !exercise_intensity.is_finite() {
        return Err(TwinError::InvalidState { component: "exercise_intensity" });
    }
    let d = rhs(&state.to_array(), params, u_insulin, exercise_intensity);
    Ok(StateDerivative { glucose: d[0], insulin_action: d[1], insulin: d[2], gut1: d[3], gut2: d[4] })
}

/// Classic RK4 over `[t, t + dt]`. `intensity` is sampled at the stage times so
/// piecewise-linear exercise profiles keep fourth-order accuracy. The sixth slot
/// accumulates absorbed carbohydrate `∫ k_abs·Q2 dt`.
#[inline]
fn rk4(y: &[f64; 5], absorbed: f64, p: &PatientParams, u: f64, dt: f64, intensity: [f64; 3]) -> ([f64; 5], f64) {
    let add = |a: &[f64; 5], k: &[f64; 5], h: f64| -> [f64; 5] {
        let mut out = *a;
        for (o, ki) in out.iter_mut().zip(k) {
            *o += h * ki;
        }
        out
    };
    let k1 = rhs(y, p, u, intensity[0]);
    let y2 = add(y, &k1, dt / 2.0);
    let k2 = rhs(&y2, p, u, intensity[1]);
    let y3 = add(y, &k2, dt / 2.0);
    let k3 = rhs(&y3, p, u, intensity[1]);
    let y4 = add(y, &k3, dt);
    let k4 = rhs(&y4, p, u, intensity[2]);
    let mut out = *y;
    for j in 0..5 {
        out[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    let a = p.k_abs * dt / 6.0 * (y[4] + 2.0 * y2[4] + 2.0 * y3[4] + y4[4]);
    (out, absorbed + a)
}

fn finish_step(y: [f64; 5], t: f64) -> Result<TwinState, TwinError> {
    for (name, v) in TwinState::NAMES.iter().zip(y) {
        if !v.is_finite() {
            return Err(TwinError::Divergence { component: name, t, value: v });
        }
    }
    if y[0] <= 0.0 {
        return Err(TwinError::Divergence { component: "glucose", t, value: y[0] });
    }
    let mut state = TwinState::from_array(y, t);
    if state.insulin_action < 0.0 {
        state.insulin_action = 0.0;
    }
    Ok(state)
}

/// One RK4 step of length `dt` (min, in `(0, 5]`) with constant inputs. Remote
/// insulin action is clamped at zero afterwards.
pub fn step(
    state: &TwinState,
    params: &PatientParams,
    u_insulin: f64,
    intensity: f64,
    dt: f64,
) -> Result<TwinState, TwinError> {
    if !(dt > 0.0 && dt <= 5.0) {
        return Err(TwinError::InvalidConfig(format!("step size {dt} outside (0, 5] min")));
    }
    state.check_finite()?;
    let (y, _) = rk4(&state.to_array(), 0.0, params, u_insulin, dt, [intensity; 3]);
    finish_step(y, state.t + dt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimConfig {
    /// Integrator step (min).
    pub dt: f64,
    /// Output sample spacing (min); a whole multiple of `dt`.
    pub sample_interval: f64,
    /// Minutes over which the exercise effect ramps down after a bout.
    pub exercise_washout: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt: 1.0, sample_interval: 5.0, exercise_washout: 60.0 }
    }
}

impl SimConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self { dt, ..Self::default() }
    }

    /// Samples every integrator step.
    pub fn dense(dt: f64) -> Self {
        Self { dt, sample_interval: dt, ..Self::default() }
    }
}

fn whole_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let k = libm::round(r);
    if k >= 0.0 && (r - k).abs() <= 1e-9 * k.max(1.0) {
        Some(k as usize)
    } else {
        None
    }
}

/// Uniformly sampled glucose with the insulin delivered in each sample interval.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GlucoseTrace {
    /// min
    pub t0: f64,
    /// min
    pub dt: f64,
    /// mg/dL
    pub samples: Vec<f64>,
    /// U delivered during `[t_k, t_k + dt)`; boluses at or after the final
    /// sample time are booked on the last entry.
    pub insulin_delivered: Vec<f64>,
}

impl GlucoseTrace {
    pub fn new(t0: f64, dt: f64, samples: Vec<f64>) -> Result<Self, TwinError> {
        let insulin = alloc::vec![0.0; samples.len()];
        Self::with_insulin(t0, dt, samples, insulin)
    }

    pub fn with_insulin(t0: f64, dt: f64, samples: Vec<f64>, insulin_delivered: Vec<f64>) -> Result<Self, TwinError> {
        if !(dt.is_finite() && dt > 0.0) || !t0.is_finite() {
            return Err(TwinError::InvalidConfig(format!("trace needs dt > 0, got {dt}")));
        }
        if samples.is_empty() {
            return Err(TwinError::InvalidConfig("trace has no samples".into()));
        }
        if insulin_delivered.len() != samples.len() {
            return Err(TwinError::InvalidConfig("insulin series not aligned with samples".into()));
        }
        if samples.iter().chain(&insulin_delivered).any(|v| !v.is_finite()) {
            return Err(TwinError::InvalidState { component: "trace sample" });
        }
        Ok(Self { t0, dt, samples, insulin_delivered })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_at(&self, idx: usize) -> f64 {
        self.t0 + idx as f64 * self.dt
    }

    pub fn end_time(&self) -> f64 {
        self.time_at(self.samples.len() - 1)
    }

    /// Sample index at time `t`, if `t` falls on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        if t < self.t0 - 1e-9 {
            return None;
        }
        whole_ratio(t - self.t0, self.dt).filter(|&i| i < self.samples.len())
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples.len()).map(|i| self.time_at(i))
    }

    pub fn total_insulin(&self) -> f64 {
        self.insulin_delivered.iter().sum()
    }
}

/// Full output of [`simulate_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub trace: GlucoseTrace,
    /// Twin state at every output sample.
    pub states: Vec<TwinState>,
    /// Carbohydrate absorbed from the gut over the horizon (mg).
    pub carbs_absorbed: f64,
    /// Carbohydrate ingested over the horizon (mg).
    pub carbs_ingested: f64,
}

pub(crate) fn initial_state(params: &PatientParams, initial: InitialCondition) -> TwinState {
    let mut s = params.equilibrium_state();
    if let InitialCondition::Glucose(g) = initial {
        s.glucose = g;
    }
    s
}

enum Impulse {
    Carbs(f64),
    AnnouncedMeal(f64),
    Bolus(f64),
}

/// Simulates the twin under `plan` and `scenario`; see [`simulate_detailed`].
pub fn simulate(
    params: &PatientParams,
    plan: &UsagePlan,
    scenario: &Scenario,
    config: &SimConfig,
) -> Result<GlucoseTrace, TwinError> {
    simulate_detailed(params, plan, scenario, config).map(|s| s.trace)
}

/// Steps the twin over `[0, scenario.horizon]`.
///
/// Each step takes basal from the active plan segment (suspended while glucose is
/// below the plan's threshold), then RK4 with exercise effort sampled at the stage
/// times. Events are applied at the start of the step containing them: scenario
/// meals add carbs, plan meal announcements add carbs plus the bolus-calculator
/// dose for the current glucose, plan boluses are delivered verbatim.
pub fn simulate_detailed(
    params: &PatientParams,
    plan: &UsagePlan,
    scenario: &Scenario,
    config: &SimConfig,
) -> Result<Simulation, TwinError> {
    params.validate()?;
    plan.validate().map_err(TwinError::InvalidPlan)?;
    scenario.validate().map_err(TwinError::InvalidScenario)?;
    let dt = config.dt;
    if !(dt > 0.0 && dt <= 5.0) {
        return Err(TwinError::InvalidConfig(format!("dt {dt} outside (0, 5] min")));
    }
    let per_sample = whole_ratio(config.sample_interval, dt).filter(|&k| k >= 1).ok_or_else(|| {
        TwinError::InvalidConfig(format!("sample interval {} is not a multiple of dt {dt}", config.sample_interval))
    })?;
    let n_steps = whole_ratio(scenario.horizon, dt).ok_or_else(|| {
        TwinError::InvalidConfig(format!("horizon {} is not a multiple of dt {dt}", scenario.horizon))
    })?;
    if plan.horizon + 1e-9 < scenario.horizon {
        return Err(TwinError::PlanCoverage { t: plan.horizon });
    }

    let step_of = |time: f64| -> usize { libm::floor(time / dt + 1e-9) as usize };
    let mut impulses: Vec<(usize, Impulse)> = Vec::new();
    for m in &scenario.meals {
        impulses.push((step_of(m.time), Impulse::Carbs(m.carbs)));
    }
    for a in &plan.actions {
        let imp = match a.kind {
            ActionKind::Meal { carbs } => Impulse::AnnouncedMeal(carbs),
            ActionKind::Bolus { units } => Impulse::Bolus(units),
        };
        impulses.push((step_of(a.time), imp));
    }
    // stable: scenario events before plan events within a step
    impulses.sort_by_key(|(s, _)| *s);

    let n_samples = n_steps / per_sample + 1;
    let mut samples = Vec::with_capacity(n_samples);
    let mut states = Vec::with_capacity(n_samples);
    let mut delivered = alloc::vec![0.0; n_samples];
    let mut state = initial_state(params, scenario.initial);
    let mut absorbed = 0.0;
    let mut ingested = 0.0;
    let mut next_impulse = 0;
    let washout = config.exercise_washout;

    for j in 0..=n_steps {
        let t = j as f64 * dt;
        let slot = (j / per_sample).min(n_samples - 1);
        while next_impulse < impulses.len() && impulses[next_impulse].0 <= j {
            let (_, ref imp) = impulses[next_impulse];
            next_impulse += 1;
            let bolus = match *imp {
                Impulse::Carbs(g) => {
                    state.gut1 += MG_PER_G * g;
                    ingested += MG_PER_G * g;
                    0.0
                }
                Impulse::AnnouncedMeal(g) => {
                    state.gut1 += MG_PER_G * g;
                    ingested += MG_PER_G * g;
                    let seg = plan.segment_at(t).ok_or(TwinError::PlanCoverage { t })?;
                    bolus_dose(g, state.glucose, seg)
                }
                Impulse::Bolus(u) => u,
            };
            if bolus > 0.0 {
                state.insulin += params.bolus_concentration(bolus);
                delivered[slot] += bolus;
            }
        }
        if j % per_sample == 0 {
            samples.push(state.glucose);
            states.push(state);
        }
        if j == n_steps {
            break;
        }
        let basal = plan.basal_rate(t, state.glucose).ok_or(TwinError::PlanCoverage { t })?;
        delivered[slot] += basal * dt / 60.0;
        let u = basal * MICRO_UNITS_PER_UNIT / 60.0;
        let intensity = scenario.exercise_on_step(t, t + dt, washout);
        let (y, a) = rk4(&state.to_array(), absorbed, params, u, dt, intensity);
        absorbed = a;
        state = finish_step(y, (j + 1) as f64 * dt)?;
    }
    // events past the last step only show up in the delivery record
    for (_, imp) in &impulses[next_impulse..] {
        if let Impulse::Bolus(u) = imp {
            delivered[n_samples - 1] += *u;
        }
    }

    let trace = GlucoseTrace::with_insulin(0.0, config.sample_interval, samples, delivered)?;
    Ok(Simulation { trace, states, carbs_absorbed: absorbed, carbs_ingested: ingested })
}
