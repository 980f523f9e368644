//! Events a plan is simulated against: unannounced meals, exercise bouts and the
//! starting glucose.
//!
//! Text form (same dialect as plan files):
//!
//! ```text
//! horizon 240
//! glucose 85
//! meal 120 carbs=50
//! exercise 30 duration=30 intensity=0.8
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::text::{fmt_number, records, Record, Violation, Violations};

/// Carbohydrates eaten without a bolus-calculator announcement.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Meal {
    /// min
    pub time: f64,
    /// g
    pub carbs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExerciseBout {
    /// min
    pub start: f64,
    /// min
    pub duration: f64,
    /// Relative effort in `[0, 1]`.
    pub intensity: f64,
}

impl ExerciseBout {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Effort at `t`: full intensity inside the bout, then a linear ramp to zero
    /// over `washout` minutes.
    pub fn intensity_at(&self, t: f64, washout: f64) -> f64 {
        let end = self.end();
        if t < self.start {
            0.0
        } else if t <= end {
            self.intensity
        } else if washout > 0.0 && t < end + washout {
            self.intensity * (1.0 - (t - end) / washout)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InitialCondition {
    /// Basal glucose, no insulin action, basal insulin, empty gut.
    #[default]
    Equilibrium,
    /// Same as equilibrium except plasma glucose (mg/dL).
    Glucose(f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scenario {
    pub meals: Vec<Meal>,
    pub exercise: Vec<ExerciseBout>,
    /// min
    pub horizon: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub initial: InitialCondition,
}

impl Scenario {
    /// No events over `horizon` minutes, starting at equilibrium.
    pub fn empty(horizon: f64) -> Self {
        Self { meals: Vec::new(), exercise: Vec::new(), horizon, initial: InitialCondition::Equilibrium }
    }

    pub fn with_initial_glucose(mut self, glucose: f64) -> Self {
        self.initial = InitialCondition::Glucose(glucose);
        self
    }

    /// Combined exercise effort at `t` (largest bout wins when ramps overlap).
    pub fn exercise_intensity(&self, t: f64, washout: f64) -> f64 {
        self.exercise.iter().map(|b| b.intensity_at(t, washout)).fold(0.0, f64::max)
    }

    /// Effort at the start, middle and end of the step `[t0, t1]`, taking one-sided
    /// limits at the ends so a bout starting or stopping on a step boundary does not
    /// leak into the neighbouring step.
    pub fn exercise_on_step(&self, t0: f64, t1: f64, washout: f64) -> [f64; 3] {
        let mut out = [0.0_f64; 3];
        for b in &self.exercise {
            let right = if t0 >= b.start && t0 < b.end() { b.intensity } else { b.intensity_at(t0, washout) };
            let left = if t1 <= b.start { 0.0 } else { b.intensity_at(t1, washout) };
            let washed_out_end = washout <= 0.0 && t0 >= b.end();
            let v = [if washed_out_end { 0.0 } else { right }, b.intensity_at(0.5 * (t0 + t1), washout), left];
            for (o, vi) in out.iter_mut().zip(v) {
                *o = o.max(vi);
            }
        }
        out
    }

    pub fn total_carbs(&self) -> f64 {
        self.meals.iter().map(|m| m.carbs).sum()
    }

    pub fn validate(&self) -> Result<(), Violations> {
        let mut out = Vec::new();
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            out.push(Violation::general(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if let InitialCondition::Glucose(g) = self.initial {
            if !(g.is_finite() && g > 0.0) {
                out.push(Violation::general(format!("initial glucose must be > 0, got {g}")));
            }
        }
        let mut last = f64::NEG_INFINITY;
        for m in &self.meals {
            if !(m.time >= 0.0 && m.time <= self.horizon) {
                out.push(Violation::general(format!("meal at {} lies outside [0, {}]", m.time, self.horizon)));
            }
            if !(m.carbs.is_finite() && m.carbs > 0.0) {
                out.push(Violation::general(format!("meal at {} has non-positive carbs {}", m.time, m.carbs)));
            }
            if m.time < last {
                out.push(Violation::general(format!("meal at {} is out of time order", m.time)));
            }
            last = m.time;
        }
        let mut last = f64::NEG_INFINITY;
        for b in &self.exercise {
            if !(b.start >= 0.0 && b.start <= self.horizon) {
                out.push(Violation::general(format!("exercise at {} lies outside [0, {}]", b.start, self.horizon)));
            }
            if !(b.duration.is_finite() && b.duration > 0.0) {
                out.push(Violation::general(format!("exercise at {} has non-positive duration", b.start)));
            }
            if !(0.0..=1.0).contains(&b.intensity) {
                out.push(Violation::general(format!(
                    "exercise at {} has intensity {} outside [0, 1]",
                    b.start, b.intensity
                )));
            }
            if b.start < last {
                out.push(Violation::general(format!("exercise at {} is out of time order", b.start)));
            }
            last = b.start;
        }
        Violations::check(out)
    }

    pub fn parse(text: &str) -> Result<Self, Violations> {
        let mut builder = ScenarioBuilder::default();
        let mut errors = Vec::new();
        for rec in records(text) {
            match builder.accept(&rec) {
                Ok(true) => {}
                Ok(false) => errors.push(Violation::at(rec.line, format!("unknown record `{}`", rec.keyword))),
                Err(msg) => errors.push(Violation::at(rec.line, msg)),
            }
        }
        let scenario = builder.finish(&mut errors);
        Violations::check(errors)?;
        let mut scenario = scenario.expect("horizon present when no errors");
        scenario.sort_events();
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn sort_events(&mut self) {
        self.meals.sort_by(|a, b| a.time.total_cmp(&b.time));
        self.exercise.sort_by(|a, b| a.start.total_cmp(&b.start));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_scenario_records(self, &mut out);
        out
    }
}

pub(crate) fn write_scenario_records(s: &Scenario, out: &mut String) {
    let _ = writeln!(out, "horizon {}", fmt_number(s.horizon));
    if let InitialCondition::Glucose(g) = s.initial {
        let _ = writeln!(out, "glucose {}", fmt_number(g));
    }
    for m in &s.meals {
        let _ = writeln!(out, "meal {} carbs={}", fmt_number(m.time), fmt_number(m.carbs));
    }
    for b in &s.exercise {
        let _ = writeln!(
            out,
            "exercise {} duration={} intensity={}",
            fmt_number(b.start),
            fmt_number(b.duration),
            fmt_number(b.intensity)
        );
    }
}

/// Collects scenario records; shared with the planner context reader.
#[derive(Default)]
pub(crate) struct ScenarioBuilder {
    horizon: Option<f64>,
    initial: Option<f64>,
    meals: Vec<Meal>,
    exercise: Vec<ExerciseBout>,
}

impl ScenarioBuilder {
    /// `Ok(false)` when the record is not a scenario record.
    pub fn accept(&mut self, rec: &Record<'_>) -> Result<bool, String> {
        match rec.keyword {
            "horizon" => {
                rec.expect_shape(1, &[])?;
                if self.horizon.is_some() {
                    return Err("horizon given more than once".into());
                }
                self.horizon = Some(rec.number_at(0, "horizon")?);
            }
            "glucose" => {
                rec.expect_shape(1, &[])?;
                if self.initial.is_some() {
                    return Err("glucose given more than once".into());
                }
                self.initial = Some(rec.number_at(0, "glucose")?);
            }
            "meal" => {
                rec.expect_shape(1, &["carbs"])?;
                self.meals.push(Meal { time: rec.number_at(0, "time")?, carbs: rec.named_number("carbs")? });
            }
            "exercise" => {
                rec.expect_shape(1, &["duration", "intensity"])?;
                self.exercise.push(ExerciseBout {
                    start: rec.number_at(0, "start")?,
                    duration: rec.named_number("duration")?,
                    intensity: rec.named_number("intensity")?,
                });
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn finish(self, errors: &mut Vec<Violation>) -> Option<Scenario> {
        let Some(horizon) = self.horizon else {
            errors.push(Violation::general("missing `horizon` record"));
            return None;
        };
        Some(Scenario {
            meals: self.meals,
            exercise: self.exercise,
            horizon,
            initial: self.initial.map_or(InitialCondition::Equilibrium, InitialCondition::Glucose),
        })
    }
}
