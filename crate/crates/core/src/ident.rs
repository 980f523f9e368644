//! Twin identification from routine device records.
//!
//! [`fit`] recovers the free [`PatientParams`] by bound-constrained nonlinear least
//! squares (Levenberg-Marquardt on box-normalised coordinates, forward-difference
//! Jacobian, multi-start) against the CGM samples, simulating the twin under the
//! logged basal, boluses and meals. Only the supplied record is used.
//!
//! [`identifiability`] reports how strongly the simulated CGM reacts to each
//! parameter, which shows when the record cannot pin a parameter down.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{norm, Square};
use crate::model::{simulate, GlucoseTrace, PatientParams, SimConfig, TwinError};
use crate::plan::{ConfigSegment, PlanAction, UsagePlan};
use crate::scenario::{InitialCondition, Meal, Scenario};

/// Shortest record accepted by [`fit`] (min).
pub const MIN_RECORD_SPAN: f64 = 360.0;
/// Relative step for sensitivity finite differences.
pub const SENSITIVITY_STEP: f64 = 1e-4;
/// Parameters whose sensitivity is below this fraction of the largest are flagged.
pub const UNIDENTIFIABLE_RATIO: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IdentError {
    #[error("record spans {span} min; at least {min} min required")]
    RecordTooShort { span: f64, min: f64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("objective is not finite at the initial parameters")]
    NonFiniteObjective,
    #[error("all {0} starts diverged")]
    AllStartsDiverged(usize),
    #[error(transparent)]
    Simulation(#[from] TwinError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ParamId {
    P1,
    P2,
    P3,
    N,
    Gb,
    Ib,
    Vi,
    Vg,
    KEmp,
    KAbs,
    FBio,
    AlphaEx,
}

impl ParamId {
    pub const ALL: [ParamId; 12] = [
        Self::P1,
        Self::P2,
        Self::P3,
        Self::N,
        Self::Gb,
        Self::Ib,
        Self::Vi,
        Self::Vg,
        Self::KEmp,
        Self::KAbs,
        Self::FBio,
        Self::AlphaEx,
    ];

    /// Parameters fitted by default; volumes, basal levels and gut rates stay fixed.
    pub const DEFAULT_FREE: [ParamId; 5] = [Self::P1, Self::P2, Self::P3, Self::N, Self::AlphaEx];

    pub fn name(self) -> &'static str {
        match self {
            Self::P1 => "p1",
            Self::P2 => "p2",
            Self::P3 => "p3",
            Self::N => "n",
            Self::Gb => "gb",
            Self::Ib => "ib",
            Self::Vi => "vi",
            Self::Vg => "vg",
            Self::KEmp => "k_emp",
            Self::KAbs => "k_abs",
            Self::FBio => "f_bio",
            Self::AlphaEx => "alpha_ex",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn get(self, p: &PatientParams) -> f64 {
        match self {
            Self::P1 => p.p1,
            Self::P2 => p.p2,
            Self::P3 => p.p3,
            Self::N => p.n,
            Self::Gb => p.gb,
            Self::Ib => p.ib,
            Self::Vi => p.vi,
            Self::Vg => p.vg,
            Self::KEmp => p.k_emp,
            Self::KAbs => p.k_abs,
            Self::FBio => p.f_bio,
            Self::AlphaEx => p.alpha_ex,
        }
    }

    pub fn set(self, p: &mut PatientParams, v: f64) {
        let slot = match self {
            Self::P1 => &mut p.p1,
            Self::P2 => &mut p.p2,
            Self::P3 => &mut p.p3,
            Self::N => &mut p.n,
            Self::Gb => &mut p.gb,
            Self::Ib => &mut p.ib,
            Self::Vi => &mut p.vi,
            Self::Vg => &mut p.vg,
            Self::KEmp => &mut p.k_emp,
            Self::KAbs => &mut p.k_abs,
            Self::FBio => &mut p.f_bio,
            Self::AlphaEx => &mut p.alpha_ex,
        };
        *slot = v;
    }

    /// Physiologically plausible default search box.
    pub fn default_bounds(self) -> (f64, f64) {
        match self {
            Self::P1 => (0.002, 0.08),
            Self::P2 => (0.002, 0.1),
            Self::P3 => (1.0e-6, 1.0e-4),
            Self::N => (0.02, 0.3),
            Self::Gb => (60.0, 250.0),
            Self::Ib => (2.0, 50.0),
            Self::Vi => (5.0, 25.0),
            Self::Vg => (60.0, 250.0),
            Self::KEmp => (0.005, 0.2),
            Self::KAbs => (0.005, 0.2),
            Self::FBio => (0.5, 1.0),
            Self::AlphaEx => (0.0, 10.0),
        }
    }
}

/// Per-parameter search boxes; the listed parameters are the free ones.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bounds {
    pub entries: Vec<(ParamId, f64, f64)>,
}

impl Bounds {
    pub fn defaults_for(free: &[ParamId]) -> Self {
        Self {
            entries: free
                .iter()
                .map(|&p| {
                    let (lo, hi) = p.default_bounds();
                    (p, lo, hi)
                })
                .collect(),
        }
    }

    pub fn free(&self) -> Vec<ParamId> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn set(&mut self, id: ParamId, lo: f64, hi: f64) {
        match self.entries.iter_mut().find(|e| e.0 == id) {
            Some(e) => *e = (id, lo, hi),
            None => self.entries.push((id, lo, hi)),
        }
    }

    fn check(&self, init: &PatientParams) -> Result<(), IdentError> {
        if self.entries.is_empty() {
            return Err(IdentError::InvalidBounds("no free parameters".into()));
        }
        for (i, &(id, lo, hi)) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|e| e.0 == id) {
                return Err(IdentError::InvalidBounds(format!("{} listed twice", id.name())));
            }
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(IdentError::InvalidBounds(format!("{}: need lo < hi, got [{lo}, {hi}]", id.name())));
            }
            let v = id.get(init);
            if !(lo..=hi).contains(&v) {
                return Err(IdentError::InvalidBounds(format!(
                    "{}: initial value {v} outside [{lo}, {hi}]",
                    id.name()
                )));
            }
            let mut probe = *init;
            for x in [lo, hi] {
                id.set(&mut probe, x);
                if let Err(e) = probe.validate() {
                    return Err(IdentError::InvalidBounds(format!(
                        "{}: box edge {x} is not admissible ({e})",
                        id.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimedValue {
    /// min, same clock as the CGM trace
    pub time: f64,
    pub value: f64,
}

impl TimedValue {
    pub fn new(time: f64, value: f64) -> Self {
        Self { time, value }
    }
}

/// CGM plus pump logs from normal device use.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UsageRecord {
    pub cgm: GlucoseTrace,
    /// Basal rate changes (U/h), each holding until the next.
    pub basal_log: Vec<TimedValue>,
    /// U
    pub bolus_log: Vec<TimedValue>,
    /// g
    pub meal_log: Vec<TimedValue>,
}

impl UsageRecord {
    pub fn span(&self) -> f64 {
        self.cgm.end_time() - self.cgm.t0
    }

    pub fn validate(&self) -> Result<(), IdentError> {
        for (name, log) in [("basal", &self.basal_log), ("bolus", &self.bolus_log), ("meal", &self.meal_log)] {
            if log.windows(2).any(|w| w[0].time > w[1].time) {
                return Err(IdentError::InvalidRecord(format!("{name} log is not time-sorted")));
            }
            if log.iter().any(|e| !(e.time.is_finite() && e.value.is_finite() && e.value >= 0.0)) {
                return Err(IdentError::InvalidRecord(format!("{name} log has a negative or non-finite entry")));
            }
        }
        if self.cgm.samples.iter().any(|&g| g <= 0.0) {
            return Err(IdentError::InvalidRecord("CGM has non-positive glucose".into()));
        }
        Ok(())
    }

    /// Record the twin itself would produce: CGM sampled every `cgm_dt` minutes
    /// over `span` from `start_glucose`, under the given logs (times from 0).
    pub fn simulated(
        params: &PatientParams,
        start_glucose: f64,
        span: f64,
        cgm_dt: f64,
        basal_log: Vec<TimedValue>,
        bolus_log: Vec<TimedValue>,
        meal_log: Vec<TimedValue>,
    ) -> Result<Self, IdentError> {
        let n = libm::round(span / cgm_dt) as usize + 1;
        let cgm = GlucoseTrace::new(0.0, cgm_dt, alloc::vec![start_glucose; n])?;
        let mut record = Self { cgm, basal_log, bolus_log, meal_log };
        record.validate()?;
        let (plan, scenario) = record.replay_inputs();
        let sim = SimConfig { dt: FitConfig::default().dt, sample_interval: cgm_dt, ..SimConfig::default() };
        record.cgm = simulate(params, &plan, &scenario, &sim)?;
        Ok(record)
    }

    /// The plan and scenario that replay this record on the twin: basal log as
    /// plan segments, boluses as manual boluses, meals as unannounced scenario
    /// meals, starting from the first CGM reading.
    pub fn replay_inputs(&self) -> (UsagePlan, Scenario) {
        let t0 = self.cgm.t0;
        let horizon = self.span();
        let settings = |start: f64, basal: f64| ConfigSegment { start, basal, isf: 50.0, cr: 10.0, target: 120.0 };
        let initial_rate =
            self.basal_log.iter().rev().find(|e| e.time <= t0).or(self.basal_log.first()).map_or(0.0, |e| e.value);
        let mut segments = alloc::vec![settings(0.0, initial_rate)];
        for e in &self.basal_log {
            let t = e.time - t0;
            if t > 0.0 && t < horizon {
                let last = segments.last_mut().expect("seeded with one segment");
                if last.start == t {
                    last.basal = e.value;
                } else {
                    segments.push(settings(t, e.value));
                }
            }
        }
        let in_window = |e: &&TimedValue| e.time >= t0 && e.time - t0 <= horizon && e.value > 0.0;
        let actions =
            self.bolus_log.iter().filter(in_window).map(|e| PlanAction::bolus(e.time - t0, e.value)).collect();
        let meals =
            self.meal_log.iter().filter(in_window).map(|e| Meal { time: e.time - t0, carbs: e.value }).collect();
        let plan = UsagePlan { segments, actions, horizon, suspend_threshold: None };
        let scenario =
            Scenario { meals, exercise: Vec::new(), horizon, initial: InitialCondition::Glucose(self.cgm.samples[0]) };
        (plan, scenario)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitConfig {
    pub starts: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Integrator step (min); residuals are taken at the CGM sample times.
    pub dt: f64,
    pub exercise_washout: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { starts: 8, max_iterations: 200, seed: 0, dt: 1.0, exercise_washout: 60.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamSensitivity {
    pub param: ParamId,
    /// L2 norm over samples of `θ·∂G/∂θ` (mg/dL).
    pub sensitivity: f64,
    pub unidentifiable: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Identifiability {
    pub params: Vec<ParamSensitivity>,
    /// Condition number of the Gram matrix of unit-normalised sensitivity
    /// columns; `None` when it is singular.
    pub condition_number: Option<f64>,
}

impl Identifiability {
    pub fn flagged(&self) -> Vec<ParamId> {
        self.params.iter().filter(|p| p.unidentifiable).map(|p| p.param).collect()
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamSensitivity> {
        self.params.iter().find(|p| p.param == id)
    }

    /// Condition number with a singular Gram matrix reported as infinity.
    pub fn condition(&self) -> f64 {
        self.condition_number.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitResult {
    pub params: PatientParams,
    /// mg/dL
    pub rmse: f64,
    /// RMSE at the initial parameters (mg/dL).
    pub initial_rmse: f64,
    /// Iterations used by the winning start.
    pub n_iterations: usize,
    pub converged: bool,
    pub starts_diverged: usize,
    pub identifiability: Identifiability,
}

struct Problem<'a> {
    record: &'a UsageRecord,
    plan: UsagePlan,
    scenario: Scenario,
    sim: SimConfig,
    base: PatientParams,
    bounds: &'a Bounds,
}

impl Problem<'_> {
    fn params_at(&self, z: &[f64]) -> PatientParams {
        let mut p = self.base;
        for (&(id, lo, hi), &zi) in self.bounds.entries.iter().zip(z) {
            id.set(&mut p, lo + zi.clamp(0.0, 1.0) * (hi - lo));
        }
        p
    }

    fn to_unit(&self, p: &PatientParams) -> Vec<f64> {
        self.bounds.entries.iter().map(|&(id, lo, hi)| ((id.get(p) - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    }

    fn simulate(&self, p: &PatientParams) -> Result<Vec<f64>, TwinError> {
        Ok(simulate(p, &self.plan, &self.scenario, &self.sim)?.samples)
    }

    fn residuals(&self, p: &PatientParams) -> Option<Vec<f64>> {
        let sim = self.simulate(p).ok()?;
        let r: Vec<f64> = sim.iter().zip(&self.record.cgm.samples).map(|(s, o)| s - o).collect();
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn cost(r: &[f64]) -> f64 {
        r.iter().map(|v| v * v).sum()
    }

    fn rmse(&self, cost: f64) -> f64 {
        libm::sqrt(cost / self.record.cgm.len() as f64)
    }
}

fn prepare<'a>(
    record: &'a UsageRecord,
    base: PatientParams,
    bounds: &'a Bounds,
    config: &FitConfig,
) -> Result<Problem<'a>, IdentError> {
    record.validate()?;
    base.validate()?;
    let (plan, scenario) = record.replay_inputs();
    let sim = SimConfig { dt: config.dt, sample_interval: record.cgm.dt, exercise_washout: config.exercise_washout };
    Ok(Problem { record, plan, scenario, sim, base, bounds })
}

struct StartOutcome {
    z: Vec<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
}

fn levenberg_marquardt(problem: &Problem<'_>, z0: Vec<f64>, max_iterations: usize) -> Option<StartOutcome> {
    const FD_STEP: f64 = 1e-7;
    let k = z0.len();
    let mut z = z0;
    let mut r = problem.residuals(&problem.params_at(&z))?;
    let mut cost = Problem::cost(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        if cost <= 1e-24 {
            converged = true;
            break;
        }
        iterations += 1;
        let mut columns = Vec::with_capacity(k);
        for j in 0..k {
            let mut zp = z.clone();
            let h = if z[j] + FD_STEP <= 1.0 { FD_STEP } else { -FD_STEP };
            zp[j] += h;
            let rp = problem.residuals(&problem.params_at(&zp))?;
            columns.push(rp.iter().zip(&r).map(|(a, b)| (a - b) / h).collect::<Vec<f64>>());
        }
        let jtj = Square::gram(&columns);
        let grad: Vec<f64> = columns.iter().map(|c| c.iter().zip(&r).map(|(a, b)| a * b).sum()).collect();
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..k {
                let d = jtj.get(i, i).max(1e-12);
                a.set(i, i, jtj.get(i, i) + lambda * d);
            }
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            let Some(delta) = a.solve(&neg) else {
                lambda *= 4.0;
                continue;
            };
            let z_new: Vec<f64> = z.iter().zip(&delta).map(|(zi, di)| (zi + di).clamp(0.0, 1.0)).collect();
            let step = z_new.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if step < 1e-14 {
                break;
            }
            match problem.residuals(&problem.params_at(&z_new)) {
                Some(r_new) if Problem::cost(&r_new) < cost => {
                    let new_cost = Problem::cost(&r_new);
                    let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    z = z_new;
                    r = r_new;
                    cost = new_cost;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    if rel < 1e-12 || step < 1e-12 {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !improved {
            // no descent step exists at any damping: a (box-constrained) stationary point
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    Some(StartOutcome { z, cost, iterations, converged })
}

/// Fits the free parameters listed in `bounds` to `record`, starting from `init`.
pub fn fit(
    record: &UsageRecord,
    init: &PatientParams,
    bounds: &Bounds,
    config: &FitConfig,
) -> Result<FitResult, IdentError> {
    let span = record.span();
    if span < MIN_RECORD_SPAN {
        return Err(IdentError::RecordTooShort { span, min: MIN_RECORD_SPAN });
    }
    bounds.check(init)?;
    let problem = prepare(record, *init, bounds, config)?;
    let initial_cost = problem.residuals(init).map(|r| Problem::cost(&r)).ok_or(IdentError::NonFiniteObjective)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<StartOutcome> = None;
    let mut diverged = 0;
    for s in 0..config.starts.max(1) {
        let z0 = if s == 0 {
            problem.to_unit(init)
        } else {
            (0..bounds.entries.len()).map(|_| rng.random::<f64>()).collect()
        };
        match levenberg_marquardt(&problem, z0, config.max_iterations) {
            Some(out) => {
                if best.as_ref().is_none_or(|b| out.cost < b.cost) {
                    best = Some(out);
                }
            }
            None => diverged += 1,
        }
        if best.as_ref().is_some_and(|b| b.cost <= 1e-24) {
            break;
        }
    }
    let best = best.ok_or(IdentError::AllStartsDiverged(config.starts.max(1)))?;
    let params = problem.params_at(&best.z);
    let identifiability = identifiability_with(&problem, &params, &bounds.free())?;
    Ok(FitResult {
        params,
        rmse: problem.rmse(best.cost),
        initial_rmse: problem.rmse(initial_cost),
        n_iterations: best.iterations,
        converged: best.converged,
        starts_diverged: diverged,
        identifiability,
    })
}

/// Central-difference sensitivities of the simulated CGM to each listed
/// parameter (a parameter may be listed twice).
pub fn identifiability(
    params: &PatientParams,
    record: &UsageRecord,
    which: &[ParamId],
) -> Result<Identifiability, IdentError> {
    let bounds = Bounds { entries: Vec::new() };
    let problem = prepare(record, *params, &bounds, &FitConfig::default())?;
    identifiability_with(&problem, params, which)
}

fn sensitivity_columns(
    problem: &Problem<'_>,
    params: &PatientParams,
    which: &[ParamId],
) -> Result<Vec<Vec<f64>>, IdentError> {
    let mut columns = Vec::with_capacity(which.len());
    for &id in which {
        let v = id.get(params);
        let (h, scale) = if v != 0.0 { (SENSITIVITY_STEP * v.abs(), v.abs()) } else { (SENSITIVITY_STEP, 1.0) };
        let mut plus = *params;
        id.set(&mut plus, v + h);
        let mut minus = *params;
        id.set(&mut minus, v - h);
        let yp = problem.simulate(&plus)?;
        let ym = problem.simulate(&minus)?;
        columns.push(yp.iter().zip(&ym).map(|(a, b)| (a - b) / (2.0 * h) * scale).collect());
    }
    Ok(columns)
}

fn identifiability_with(
    problem: &Problem<'_>,
    params: &PatientParams,
    which: &[ParamId],
) -> Result<Identifiability, IdentError> {
    let columns = sensitivity_columns(problem, params, which)?;
    let norms: Vec<f64> = columns.iter().map(|c| norm(c)).collect();
    let largest = norms.iter().copied().fold(0.0, f64::max);
    let out = which
        .iter()
        .zip(&norms)
        .map(|(&param, &sensitivity)| ParamSensitivity {
            param,
            sensitivity,
            unidentifiable: sensitivity <= UNIDENTIFIABLE_RATIO * largest,
        })
        .collect();
    Ok(Identifiability { params: out, condition_number: normalized_condition(&columns) })
}

/// Condition number of the Gram matrix of unit-normalised columns.
pub fn normalized_condition(columns: &[Vec<f64>]) -> Option<f64> {
    if columns.is_empty() {
        return None;
    }
    let mut unit = Vec::with_capacity(columns.len());
    for c in columns {
        let n = norm(c);
        if n == 0.0 {
            return None;
        }
        unit.push(c.iter().map(|v| v / n).collect::<Vec<f64>>());
    }
    let ev = Square::gram(&unit).symmetric_eigenvalues();
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    (lo > 0.0).then(|| hi / lo)
}

/// Central-difference gradient of the residual sum of squares with respect to
/// the listed parameters, using relative step `rel_step`.
pub fn objective_gradient(
    record: &UsageRecord,
    params: &PatientParams,
    which: &[ParamId],
    rel_step: f64,
) -> Result<Vec<f64>, IdentError> {
    let bounds = Bounds { entries: Vec::new() };
    let problem = prepare(record, *params, &bounds, &FitConfig::default())?;
    let cost = |p: &PatientParams| -> Result<f64, IdentError> {
        problem.residuals(p).map(|r| Problem::cost(&r)).ok_or(IdentError::NonFiniteObjective)
    };
    which
        .iter()
        .map(|&id| {
            let v = id.get(params);
            let h = rel_step * if v != 0.0 { v.abs() } else { 1.0 };
            let mut plus = *params;
            id.set(&mut plus, v + h);
            let mut minus = *params;
            id.set(&mut minus, v - h);
            Ok((cost(&plus)? - cost(&minus)?) / (2.0 * h))
        })
        .collect()
}

/// Residual RMSE of `params` on `record` (mg/dL).
pub fn rmse(record: &UsageRecord, params: &PatientParams) -> Result<f64, IdentError> {
    let bounds = Bounds { entries: Vec::new() };
    let problem = prepare(record, *params, &bounds, &FitConfig::default())?;
    let r = problem.residuals(params).ok_or(IdentError::NonFiniteObjective)?;
    Ok(problem.rmse(Problem::cost(&r)))
}
