//! Plan refinement: propose a plan, simulate it on the twin, score it against the
//! safety formula, feed the score back, repeat until safe or out of budget.
//!
//! Two proposal sources share the loop machinery here: [`local`] is a seeded hill
//! climber over small setting/action moves, [`remote`] drives a chat-completion
//! model through a [`ChatModel`](remote::ChatModel) and counts its irrelevant
//! replies.

pub mod context;
pub mod local;
pub mod remote;

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

pub use context::{FeasibilityConstraints, FeasibilityViolation, PlanContext};
pub use local::{local_search_refine, local_search_refine_observed, LocalSearchConfig, LocalSearchPlanner};
pub use remote::{llm_refine, llm_refine_observed, ChatMessage, ChatModel, ChatRole, LlmOutcome};

use crate::model::{simulate, GlucoseTrace, TwinError};
use crate::plan::{ActionKind, UsagePlan};
use crate::safety::{evaluate_trace, PlanQuality, SafetyError};
use crate::text::fmt_number;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlannerError {
    #[error("no feasible seed plan: {0}")]
    InfeasibleContext(String),
    #[error("planner failure: {message}")]
    Failure {
        message: String,
        /// Iterations completed before the failure.
        log: Box<RefinementLog>,
        counter: HallucinationCounter,
    },
    #[error("invalid planning context: {0}")]
    InvalidContext(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StopReason {
    /// The best plan satisfies the safety formula.
    Safe,
    /// Budget exhausted without a safe plan (or while still improving one).
    Budget,
    PlannerFailure,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Iteration {
    /// 1-based proposal number (LLM loops: the query number).
    pub index: usize,
    pub plan: UsagePlan,
    pub quality: PlanQuality,
    /// Text returned to the proposer after evaluation.
    pub feedback: String,
    /// Whether the plan became the new incumbent.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RefinementLog {
    pub iterations: Vec<Iteration>,
    /// Position in `iterations` of the best plan.
    pub best_index: Option<usize>,
    pub stop_reason: StopReason,
}

impl RefinementLog {
    pub fn new() -> Self {
        Self { iterations: Vec::new(), best_index: None, stop_reason: StopReason::Budget }
    }

    pub fn best(&self) -> Option<&Iteration> {
        self.best_index.map(|i| &self.iterations[i])
    }

    /// Appends an evaluated plan, updating the incumbent if it scores higher.
    pub(crate) fn record(&mut self, index: usize, plan: UsagePlan, quality: PlanQuality, feedback: String) -> bool {
        let accepted = self.best().is_none_or(|b| quality.score > b.quality.score);
        self.iterations.push(Iteration { index, plan, quality, feedback, accepted });
        if accepted {
            self.best_index = Some(self.iterations.len() - 1);
        }
        accepted
    }
}

impl Default for RefinementLog {
    fn default() -> Self {
        Self::new()
    }
}

/// Replies from a remote planner that could not be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HallucinationCounter {
    pub queries: usize,
    /// Unparseable or feasibility-violating replies.
    pub irrelevant: usize,
}

impl HallucinationCounter {
    pub fn per_100(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            100.0 * self.irrelevant as f64 / self.queries as f64
        }
    }
}

/// A plan source for the refinement loop.
pub trait Planner {
    fn propose(&mut self, context: &PlanContext, history: &RefinementLog) -> Result<UsagePlan, PlannerError>;
}

/// Simulates `plan` for the context and scores it against the context's formula.
pub fn evaluate_plan(context: &PlanContext, plan: &UsagePlan) -> Result<(GlucoseTrace, PlanQuality), EvalError> {
    let trace = simulate(&context.params, plan, &context.scenario, &context.sim)?;
    let quality = evaluate_trace(&trace, &context.spec, &context.weights)?;
    Ok((trace, quality))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Simulation(#[from] TwinError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
}

/// Feedback text describing an evaluated plan, as passed back to a proposer.
pub fn quality_feedback(context: &PlanContext, trace: &GlucoseTrace, q: &PlanQuality) -> String {
    let mut out = String::new();
    let verdict = if q.is_safe() { "SAFE" } else { "UNSAFE" };
    let _ = write!(out, "{verdict}: robustness {} mg/dL for `{}`", fmt_number(round2(q.robustness)), context.spec);
    if let Some((i, g)) = trace.samples.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
        let _ =
            write!(out, "; lowest glucose {} mg/dL at t={} min", fmt_number(round2(*g)), fmt_number(trace.time_at(i)));
    }
    let _ = write!(
        out,
        "; time in range {}%, above range {}%, below range {}%; mean glucose {} mg/dL; hypo episodes {}, severe {}; score {}",
        fmt_number(round2(100.0 * q.tir)),
        fmt_number(round2(100.0 * q.tar)),
        fmt_number(round2(100.0 * q.tbr)),
        fmt_number(round2(q.mean_glucose)),
        q.hypo_episodes,
        q.severe_hypo_episodes,
        fmt_number(round2(q.score)),
    );
    out
}

fn round2(v: f64) -> f64 {
    libm::round(v * 100.0) / 100.0
}

/// Every constraint the plan breaks; empty iff feasible.
pub fn check_feasibility(plan: &UsagePlan, constraints: &FeasibilityConstraints) -> Vec<FeasibilityViolation> {
    let mut out = Vec::new();
    let ranges = [
        ("basal", constraints.basal),
        ("isf", constraints.isf),
        ("cr", constraints.cr),
        ("target", constraints.target),
    ];
    for (i, seg) in plan.segments.iter().enumerate() {
        let values = [seg.basal, seg.isf, seg.cr, seg.target];
        for ((field, range), value) in ranges.iter().zip(values) {
            let Some((lo, hi)) = *range else { continue };
            let bound = if value < lo {
                lo
            } else if value > hi {
                hi
            } else {
                continue;
            };
            out.push(FeasibilityViolation {
                field: String::from(*field),
                value,
                bound,
                time: Some(seg.start),
                message: format!(
                    "segment {}-{}: {field}={} outside [{}, {}]",
                    fmt_number(seg.start),
                    fmt_number(plan.segment_end(i)),
                    fmt_number(value),
                    fmt_number(lo),
                    fmt_number(hi)
                ),
            });
        }
    }
    for a in &plan.actions {
        match a.kind {
            ActionKind::Bolus { units } => {
                if let Some(max) = constraints.max_bolus {
                    if units > max {
                        out.push(FeasibilityViolation {
                            field: "bolus".into(),
                            value: units,
                            bound: max,
                            time: Some(a.time),
                            message: format!(
                                "bolus at {} min: {} U exceeds max-bolus {} U",
                                fmt_number(a.time),
                                fmt_number(units),
                                fmt_number(max)
                            ),
                        });
                    }
                }
            }
            ActionKind::Meal { carbs } => {
                if let Some(max) = constraints.max_carbs {
                    if carbs > max {
                        out.push(FeasibilityViolation {
                            field: "carbs".into(),
                            value: carbs,
                            bound: max,
                            time: Some(a.time),
                            message: format!(
                                "meal at {} min: {} g exceeds max-carbs {} g",
                                fmt_number(a.time),
                                fmt_number(carbs),
                                fmt_number(max)
                            ),
                        });
                    }
                }
            }
        }
    }
    let counts =
        [("boluses", constraints.max_boluses, plan.bolus_count()), ("meals", constraints.max_meals, plan.meal_count())];
    for (field, max, count) in counts {
        if let Some(max) = max {
            if count > max {
                out.push(FeasibilityViolation {
                    field: field.into(),
                    value: count as f64,
                    bound: max as f64,
                    time: None,
                    message: format!("{count} {field} exceed max-{field} {max}"),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{ConfigSegment, PlanAction};

    fn plan() -> UsagePlan {
        UsagePlan::constant(ConfigSegment { start: 0.0, basal: 1.0, isf: 50.0, cr: 10.0, target: 120.0 }, 240.0)
    }

    #[test]
    fn feasible_plan_has_no_violations() {
        let c = FeasibilityConstraints {
            basal: Some((0.0, 3.0)),
            max_bolus: Some(10.0),
            max_meals: Some(3),
            ..FeasibilityConstraints::default()
        };
        assert!(check_feasibility(&plan(), &c).is_empty());
    }

    #[test]
    fn oversized_bolus() {
        let mut p = plan();
        p.actions.push(PlanAction::bolus(45.0, 12.0));
        let c = FeasibilityConstraints { max_bolus: Some(10.0), ..FeasibilityConstraints::default() };
        let v = check_feasibility(&p, &c);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].field.as_str(), v[0].value, v[0].bound, v[0].time), ("bolus", 12.0, 10.0, Some(45.0)));
        assert!(v[0].message.contains("45 min"));
    }

    #[test]
    fn too_many_snacks() {
        let mut p = plan();
        for t in 0..5 {
            p.actions.push(PlanAction::meal(10.0 * t as f64, 15.0));
        }
        let c = FeasibilityConstraints { max_meals: Some(3), ..FeasibilityConstraints::default() };
        let v = check_feasibility(&p, &c);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].field.as_str(), v[0].value, v[0].bound), ("meals", 5.0, 3.0));
    }

    #[test]
    fn setting_ranges() {
        let mut p = plan();
        p.segments[0].basal = 4.0;
        p.segments[0].target = 75.0;
        let c = FeasibilityConstraints {
            basal: Some((0.0, 3.0)),
            target: Some((90.0, 180.0)),
            ..FeasibilityConstraints::default()
        };
        let v = check_feasibility(&p, &c);
        let fields: Vec<_> = v.iter().map(|v| (v.field.as_str(), v.bound)).collect();
        assert_eq!(fields, [("basal", 3.0), ("target", 90.0)]);
    }

    #[test]
    fn counter_rate() {
        let c = HallucinationCounter { queries: 40, irrelevant: 3 };
        assert_eq!(c.per_100(), 7.5);
        assert_eq!(HallucinationCounter::default().per_100(), 0.0);
    }
}
