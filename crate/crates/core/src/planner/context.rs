//! Planning context and its text form.
//!
//! Same record dialect as plans and scenarios; scenario records (`horizon`,
//! `glucose`, `meal`, `exercise`) describe what will happen, the rest describe
//! the current pump settings, the goal and the user's limits:
//!
//! ```text
//! glucose 85
//! horizon 240
//! exercise 30 duration=30 intensity=0.8
//! settings basal=1 isf=50 cr=10 target=120
//! goal I want to run for 30 mins in the next hour
//! spec always 0 240 (ge 70)
//! limit basal 0 3
//! max-bolus 10
//! max-boluses 3
//! max-meals 3
//! max-carbs 45
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::model::{PatientParams, SimConfig};
use crate::plan::{ConfigSegment, UsagePlan};
use crate::safety::{ScoreWeights, StlFormula};
use crate::scenario::{write_scenario_records, InitialCondition, Scenario, ScenarioBuilder};
use crate::text::{fmt_number, records, Violation, Violations};

/// User-preference limits a proposed plan must respect before it is simulated.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeasibilityConstraints {
    /// U/h
    pub basal: Option<(f64, f64)>,
    pub isf: Option<(f64, f64)>,
    pub cr: Option<(f64, f64)>,
    pub target: Option<(f64, f64)>,
    /// Largest single manual bolus (U).
    pub max_bolus: Option<f64>,
    pub max_boluses: Option<usize>,
    pub max_meals: Option<usize>,
    /// Largest single announced meal (g).
    pub max_carbs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeasibilityViolation {
    pub field: String,
    pub value: f64,
    pub bound: f64,
    /// Time of the offending segment/action, when there is one.
    pub time: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanContext {
    pub params: PatientParams,
    /// Upcoming events; `initial` carries the current CGM reading.
    pub scenario: Scenario,
    /// Pump settings in effect now.
    pub settings: ConfigSegment,
    pub suspend_threshold: Option<f64>,
    pub goal: String,
    pub spec: StlFormula,
    pub constraints: FeasibilityConstraints,
    pub sim: SimConfig,
    pub weights: ScoreWeights,
}

impl PlanContext {
    /// Current glucose reading (mg/dL).
    pub fn current_glucose(&self) -> f64 {
        match self.scenario.initial {
            InitialCondition::Glucose(g) => g,
            InitialCondition::Equilibrium => self.params.gb,
        }
    }

    /// Status-quo plan: current settings held over the horizon, no actions.
    pub fn seed_plan(&self) -> UsagePlan {
        let mut plan = UsagePlan::constant(self.settings, self.scenario.horizon);
        plan.suspend_threshold = self.suspend_threshold;
        plan
    }

    /// Default safety formula: glucose never below 70 mg/dL over the horizon.
    pub fn default_spec(horizon: f64) -> StlFormula {
        StlFormula::always(0.0, horizon, StlFormula::ge(70.0))
    }

    pub fn parse(text: &str, params: PatientParams) -> Result<Self, Violations> {
        let mut scenario = ScenarioBuilder::default();
        let mut errors = Vec::new();
        let mut settings: Option<ConfigSegment> = None;
        let mut goal = String::new();
        let mut spec: Option<StlFormula> = None;
        let mut suspend = None;
        let mut c = FeasibilityConstraints::default();

        for rec in records(text) {
            let res: Result<(), String> = (|| {
                if scenario.accept(&rec)? {
                    return Ok(());
                }
                match rec.keyword {
                    "settings" => {
                        rec.expect_shape(0, &["basal", "isf", "cr", "target"])?;
                        settings = Some(ConfigSegment {
                            start: 0.0,
                            basal: rec.named_number("basal")?,
                            isf: rec.named_number("isf")?,
                            cr: rec.named_number("cr")?,
                            target: rec.named_number("target")?,
                        });
                    }
                    "goal" => goal = rec.rest.to_string(),
                    "spec" => spec = Some(StlFormula::parse(rec.rest).map_err(|e| e.to_string())?),
                    "suspend" => {
                        rec.expect_shape(1, &[])?;
                        suspend = Some(rec.number_at(0, "threshold")?);
                    }
                    "limit" => {
                        if rec.positional.len() != 3 || !rec.named.is_empty() {
                            return Err("`limit` expects <field> <lo> <hi>".into());
                        }
                        let range = Some((rec.number_at(1, "lo")?, rec.number_at(2, "hi")?));
                        match rec.positional[0] {
                            "basal" => c.basal = range,
                            "isf" => c.isf = range,
                            "cr" => c.cr = range,
                            "target" => c.target = range,
                            other => return Err(format!("unknown limit field `{other}`")),
                        }
                    }
                    "max-bolus" => {
                        rec.expect_shape(1, &[])?;
                        c.max_bolus = Some(rec.number_at(0, "max-bolus")?);
                    }
                    "max-carbs" => {
                        rec.expect_shape(1, &[])?;
                        c.max_carbs = Some(rec.number_at(0, "max-carbs")?);
                    }
                    "max-boluses" | "max-meals" => {
                        rec.expect_shape(1, &[])?;
                        let n = rec.number_at(0, rec.keyword)?;
                        if n < 0.0 || libm::trunc(n) != n {
                            return Err(format!("{} must be a whole number", rec.keyword));
                        }
                        if rec.keyword == "max-meals" {
                            c.max_meals = Some(n as usize);
                        } else {
                            c.max_boluses = Some(n as usize);
                        }
                    }
                    other => return Err(format!("unknown record `{other}`")),
                }
                Ok(())
            })();
            if let Err(msg) = res {
                errors.push(Violation::at(rec.line, msg));
            }
        }
        let scenario = scenario.finish(&mut errors);
        if settings.is_none() {
            errors.push(Violation::general("missing `settings` record"));
        }
        Violations::check(errors)?;
        let mut scenario = scenario.expect("checked above");
        scenario.sort_events();
        scenario.validate()?;
        let settings = settings.expect("checked above");
        let seed = UsagePlan::constant(settings, scenario.horizon);
        seed.validate()?;
        let spec = spec.unwrap_or_else(|| Self::default_spec(scenario.horizon));
        Ok(Self {
            params,
            scenario,
            settings,
            suspend_threshold: suspend,
            goal,
            spec,
            constraints: c,
            sim: SimConfig::default(),
            weights: ScoreWeights::default(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_scenario_records(&self.scenario, &mut out);
        let s = &self.settings;
        let _ = writeln!(
            out,
            "settings basal={} isf={} cr={} target={}",
            fmt_number(s.basal),
            fmt_number(s.isf),
            fmt_number(s.cr),
            fmt_number(s.target)
        );
        if !self.goal.is_empty() {
            let _ = writeln!(out, "goal {}", self.goal);
        }
        let _ = writeln!(out, "spec {}", self.spec);
        if let Some(th) = self.suspend_threshold {
            let _ = writeln!(out, "suspend {}", fmt_number(th));
        }
        let c = &self.constraints;
        for (name, range) in [("basal", c.basal), ("isf", c.isf), ("cr", c.cr), ("target", c.target)] {
            if let Some((lo, hi)) = range {
                let _ = writeln!(out, "limit {name} {} {}", fmt_number(lo), fmt_number(hi));
            }
        }
        if let Some(v) = c.max_bolus {
            let _ = writeln!(out, "max-bolus {}", fmt_number(v));
        }
        if let Some(v) = c.max_boluses {
            let _ = writeln!(out, "max-boluses {v}");
        }
        if let Some(v) = c.max_meals {
            let _ = writeln!(out, "max-meals {v}");
        }
        if let Some(v) = c.max_carbs {
            let _ = writeln!(out, "max-carbs {}", fmt_number(v));
        }
        out
    }
}
