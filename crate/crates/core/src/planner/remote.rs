//! Refinement driven by a chat-completion model.
//!
//! The conversation starts with the plan grammar and the context; every reply is
//! read through the plan parser and the feasibility checker. Replies that fail
//! either are counted as irrelevant and answered with a corrective prompt naming
//! the problems; usable plans are simulated and the quality summary is sent back.
//! The loop stops at the first plan whose robustness is non-negative.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use super::{
    check_feasibility, evaluate_plan, quality_feedback, HallucinationCounter, Iteration, PlanContext, PlannerError,
    RefinementLog, StopReason,
};
use crate::plan::{parse_plan, UsagePlan};
use crate::text::fmt_number;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into() }
    }
}

/// One blocking request/response exchange with a chat model.
pub trait ChatModel {
    /// Returns the assistant reply text, or a description of the transport failure
    /// (after whatever retries the implementation performs).
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LlmOutcome {
    /// Best evaluated plan, if any reply produced one.
    pub plan: Option<UsagePlan>,
    pub log: RefinementLog,
    pub counter: HallucinationCounter,
}

pub const SYSTEM_PROMPT: &str = "You plan automated insulin delivery (AID) usage for a person with type 1 diabetes. \
Every plan you propose is simulated on the person's digital twin and checked against a safety requirement before anyone sees it. \
Answer ONLY with plan records in a ```plan fenced block, one record per line:\n\
segment <start_min> <end_min> basal=<U/h> isf=<mg/dL per U> cr=<g per U> target=<mg/dL>\n\
meal <time_min> carbs=<g>      (announced meal or snack; the pump boluses for it)\n\
bolus <time_min> units=<U>     (manual bolus)\n\
suspend <mg/dL>                (optional: withhold basal below this glucose)\n\
Segments must start at 0, be contiguous and cover the whole horizon. Times are minutes from now.";

/// First user message: the situation, the requirement and the limits.
pub fn context_prompt(ctx: &PlanContext) -> String {
    let mut out = String::new();
    if !ctx.goal.is_empty() {
        let _ = writeln!(out, "Goal: {}", ctx.goal);
    }
    let _ = writeln!(out, "Current CGM reading: {} mg/dL.", fmt_number(ctx.current_glucose()));
    let s = &ctx.settings;
    let _ = writeln!(
        out,
        "Current settings: basal {} U/h, ISF {} mg/dL per U, CR {} g per U, target {} mg/dL.",
        fmt_number(s.basal),
        fmt_number(s.isf),
        fmt_number(s.cr),
        fmt_number(s.target)
    );
    let _ = writeln!(out, "Planning horizon: {} min.", fmt_number(ctx.scenario.horizon));
    for b in &ctx.scenario.exercise {
        let _ = writeln!(
            out,
            "Exercise at {} min for {} min, intensity {}.",
            fmt_number(b.start),
            fmt_number(b.duration),
            fmt_number(b.intensity)
        );
    }
    for m in &ctx.scenario.meals {
        let _ =
            writeln!(out, "Unannounced meal at {} min: {} g carbohydrate.", fmt_number(m.time), fmt_number(m.carbs));
    }
    let _ = writeln!(out, "Safety requirement (STL): {}", ctx.spec);
    let c = &ctx.constraints;
    let mut limits = Vec::new();
    for (name, range) in [("basal", c.basal), ("isf", c.isf), ("cr", c.cr), ("target", c.target)] {
        if let Some((lo, hi)) = range {
            limits.push(format!("{name} in [{}, {}]", fmt_number(lo), fmt_number(hi)));
        }
    }
    if let Some(v) = c.max_bolus {
        limits.push(format!("each bolus at most {} U", fmt_number(v)));
    }
    if let Some(v) = c.max_boluses {
        limits.push(format!("at most {v} boluses"));
    }
    if let Some(v) = c.max_meals {
        limits.push(format!("at most {v} meals or snacks"));
    }
    if let Some(v) = c.max_carbs {
        limits.push(format!("each meal at most {} g", fmt_number(v)));
    }
    if !limits.is_empty() {
        let _ = writeln!(out, "Limits: {}.", limits.join("; "));
    }
    out.push_str("Propose a plan.");
    out
}

/// Plan text inside the first fenced block of `reply`, or the whole reply when
/// it has no fence.
pub fn extract_plan_text(reply: &str) -> &str {
    let Some(open) = reply.find("```") else {
        return reply;
    };
    let after = &reply[open + 3..];
    // skip an info string such as ```plan
    let body = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => after,
    };
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

/// Runs the feedback loop for at most `budget` queries.
pub fn llm_refine<M: ChatModel + ?Sized>(
    model: &mut M,
    context: &PlanContext,
    budget: usize,
) -> Result<LlmOutcome, PlannerError> {
    llm_refine_observed(model, context, budget, &mut |_| {})
}

/// [`llm_refine`], calling `observer` with each simulated proposal as it is logged.
pub fn llm_refine_observed<M: ChatModel + ?Sized>(
    model: &mut M,
    context: &PlanContext,
    budget: usize,
    observer: &mut dyn FnMut(&Iteration),
) -> Result<LlmOutcome, PlannerError> {
    if budget == 0 {
        return Err(PlannerError::InvalidContext("budget must be at least 1".into()));
    }
    let mut messages = alloc::vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(context_prompt(context))];
    let mut log = RefinementLog::new();
    let mut counter = HallucinationCounter::default();
    for query in 1..=budget {
        let reply = match model.complete(&messages) {
            Ok(r) => r,
            Err(message) => {
                log.stop_reason = StopReason::PlannerFailure;
                return Err(PlannerError::Failure { message, log: Box::new(log), counter });
            }
        };
        counter.queries += 1;
        messages.push(ChatMessage::assistant(reply.clone()));

        let plan = match parse_plan(extract_plan_text(&reply)) {
            Ok(p) => p,
            Err(violations) => {
                counter.irrelevant += 1;
                messages.push(ChatMessage::user(format!(
                    "That reply is not a valid plan ({violations}). Reply with plan records only, in a ```plan block."
                )));
                continue;
            }
        };
        let mut problems: Vec<String> =
            check_feasibility(&plan, &context.constraints).into_iter().map(|v| v.message).collect();
        if plan.horizon + 1e-9 < context.scenario.horizon {
            problems.push(format!(
                "segments end at {} min but must cover {} min",
                fmt_number(plan.horizon),
                fmt_number(context.scenario.horizon)
            ));
        }
        if !problems.is_empty() {
            counter.irrelevant += 1;
            messages.push(ChatMessage::user(format!(
                "That plan breaks the limits: {}. Propose a plan within the limits.",
                problems.join("; ")
            )));
            continue;
        }
        let (trace, quality) = match evaluate_plan(context, &plan) {
            Ok(v) => v,
            Err(e) => {
                counter.irrelevant += 1;
                messages.push(ChatMessage::user(format!(
                    "That plan could not be simulated ({e}). Propose a different plan."
                )));
                continue;
            }
        };
        let feedback = quality_feedback(context, &trace, &quality);
        log.record(query, plan, quality, feedback.clone());
        observer(log.iterations.last().expect("just logged"));
        if quality.is_safe() {
            // the safe plan is the only safe entry, hence the incumbent
            log.best_index = Some(log.iterations.len() - 1);
            log.stop_reason = StopReason::Safe;
            break;
        }
        messages.push(ChatMessage::user(format!(
            "Simulation result for your plan: {feedback}. Revise the plan so the safety requirement holds."
        )));
    }
    let plan = log.best().map(|b| b.plan.clone());
    Ok(LlmOutcome { plan, log, counter })
}

impl core::fmt::Display for ChatRole {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        })
    }
}
