//! Refinement runs as used by the CLI and the service job queue.

use aidtwin_core::planner::{llm_refine_observed, local_search_refine_observed, ChatModel, Iteration, PlannerError};
use aidtwin_core::{
    robustness, simulate, HallucinationCounter, LocalSearchConfig, PlanContext, PlanQuality, RefinementLog, StopReason,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Local,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutput {
    pub planner: PlannerKind,
    pub stop_reason: StopReason,
    /// Plan text of the best candidate, if any candidate was simulated.
    pub best_plan: Option<String>,
    pub best_quality: Option<PlanQuality>,
    /// Robustness of the best plan from a fresh simulation, outside the loop.
    pub verified_robustness: Option<f64>,
    /// The loop stopped on a safe plan and the re-simulation agrees.
    pub safe: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hallucinations: Option<HallucinationCounter>,
    pub log: RefinementLog,
}

/// Re-simulates the best plan from scratch and checks the formula on it.
fn finish(
    ctx: &PlanContext,
    planner: PlannerKind,
    log: RefinementLog,
    counter: Option<HallucinationCounter>,
) -> RefineOutput {
    let best = log.best().cloned();
    let verified = best.as_ref().and_then(|b| {
        let trace = simulate(&ctx.params, &b.plan, &ctx.scenario, &ctx.sim).ok()?;
        robustness(&ctx.spec, &trace, trace.t0).ok()
    });
    let safe = log.stop_reason == StopReason::Safe && verified.is_some_and(|r| r >= 0.0);
    RefineOutput {
        planner,
        stop_reason: log.stop_reason,
        best_plan: best.as_ref().map(|b| b.plan.to_text()),
        best_quality: best.map(|b| b.quality),
        verified_robustness: verified,
        safe,
        hallucinations: counter,
        log,
    }
}

pub fn refine_local(ctx: &PlanContext, budget: usize, seed: u64) -> Result<RefineOutput, PlannerError> {
    refine_local_observed(ctx, budget, seed, &mut |_| {})
}

/// [`refine_local`], reporting each logged iteration to `observer` as it happens.
pub fn refine_local_observed(
    ctx: &PlanContext,
    budget: usize,
    seed: u64,
    observer: &mut dyn FnMut(&Iteration),
) -> Result<RefineOutput, PlannerError> {
    let config = LocalSearchConfig { budget, seed, ..LocalSearchConfig::default() };
    let (_, log) = local_search_refine_observed(ctx, &config, observer)?;
    Ok(finish(ctx, PlannerKind::Local, log, None))
}

pub fn refine_llm<M: ChatModel + ?Sized>(
    ctx: &PlanContext,
    model: &mut M,
    budget: usize,
) -> Result<RefineOutput, PlannerError> {
    refine_llm_observed(ctx, model, budget, &mut |_| {})
}

pub fn refine_llm_observed<M: ChatModel + ?Sized>(
    ctx: &PlanContext,
    model: &mut M,
    budget: usize,
    observer: &mut dyn FnMut(&Iteration),
) -> Result<RefineOutput, PlannerError> {
    let out = llm_refine_observed(model, ctx, budget, observer)?;
    Ok(finish(ctx, PlannerKind::Llm, out.log, Some(out.counter)))
}
