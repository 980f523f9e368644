//! Seeded hill climbing over single-step plan edits.
//!
//! Moves: ±10 % basal on a segment, ±10 mg/dL target, ±10 % ISF, ±10 % CR,
//! add/remove a 10–30 g snack ahead of an exercise bout (or now), add/remove a
//! bolus, resize a bolus by ±0.5 U. A candidate is accepted only when it strictly
//! beats the incumbent score. After `patience` rejections in a row the search
//! kicks the incumbent with several random moves at once; the kicked plan is
//! still just a candidate, so accepted scores only ever go up.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    check_feasibility, evaluate_plan, quality_feedback, Iteration, PlanContext, Planner, PlannerError, RefinementLog,
    StopReason,
};
use crate::plan::{ActionKind, PlanAction, UsagePlan, TARGET_RANGE};

const SNACK_SIZES: [f64; 5] = [10.0, 15.0, 20.0, 25.0, 30.0];
const BOLUS_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LocalSearchConfig {
    /// Maximum number of candidate evaluations, including the seed.
    pub budget: usize,
    pub seed: u64,
    /// Rejected candidates in a row before a kick.
    pub patience: usize,
    /// Random moves combined into one kick.
    pub kick_moves: usize,
    /// Stop as soon as the incumbent is safe instead of spending the whole budget.
    pub stop_when_safe: bool,
}

impl Default for LocalSearchConfig {
    fn default() -> Self {
        Self { budget: 500, seed: 0, patience: 30, kick_moves: 3, stop_when_safe: true }
    }
}

fn round3(v: f64) -> f64 {
    libm::round(v * 1000.0) / 1000.0
}

/// Times at which a snack or bolus may be placed: now, and shortly before and
/// at the start of each exercise bout and scenario meal.
fn event_times(ctx: &PlanContext) -> Vec<f64> {
    let mut times = alloc::vec![0.0];
    let starts = ctx.scenario.exercise.iter().map(|b| b.start).chain(ctx.scenario.meals.iter().map(|m| m.time));
    for s in starts {
        for off in [30.0, 15.0, 0.0] {
            let t = (s - off).max(0.0);
            if t <= ctx.scenario.horizon && !times.contains(&t) {
                times.push(t);
            }
        }
    }
    times.sort_by(f64::total_cmp);
    times
}

fn is_snack(a: &PlanAction) -> bool {
    matches!(a.kind, ActionKind::Meal { carbs } if carbs <= 30.0)
}

/// One random edit of `plan`; `None` when the drawn move does not apply.
fn random_move(plan: &UsagePlan, ctx: &PlanContext, rng: &mut ChaCha8Rng) -> Option<UsagePlan> {
    let mut out = plan.clone();
    let seg = rng.random_range(0..plan.segments.len());
    let up = rng.random_bool(0.5);
    let scale = if up { 1.1 } else { 0.9 };
    match rng.random_range(0..9u8) {
        0 => out.segments[seg].basal = round3(out.segments[seg].basal * scale),
        1 => {
            let t = out.segments[seg].target + if up { 10.0 } else { -10.0 };
            if !(TARGET_RANGE.0..=TARGET_RANGE.1).contains(&t) {
                return None;
            }
            out.segments[seg].target = t;
        }
        2 => out.segments[seg].isf = round3(out.segments[seg].isf * scale),
        3 => out.segments[seg].cr = round3(out.segments[seg].cr * scale),
        4 => {
            let times = event_times(ctx);
            let t = times[rng.random_range(0..times.len())];
            let carbs = SNACK_SIZES[rng.random_range(0..SNACK_SIZES.len())];
            out.actions.push(PlanAction::meal(t, carbs));
        }
        5 => {
            let snacks: Vec<usize> = (0..out.actions.len()).filter(|&i| is_snack(&out.actions[i])).collect();
            if snacks.is_empty() {
                return None;
            }
            out.actions.remove(snacks[rng.random_range(0..snacks.len())]);
        }
        6 => {
            let times = event_times(ctx);
            let t = times[rng.random_range(0..times.len())];
            out.actions.push(PlanAction::bolus(t, BOLUS_STEP));
        }
        kind => {
            let boluses: Vec<usize> =
                (0..out.actions.len()).filter(|&i| matches!(out.actions[i].kind, ActionKind::Bolus { .. })).collect();
            if boluses.is_empty() {
                return None;
            }
            let i = boluses[rng.random_range(0..boluses.len())];
            let ActionKind::Bolus { units } = out.actions[i].kind else { unreachable!() };
            let resized = if kind == 7 { 0.0 } else { units + if up { BOLUS_STEP } else { -BOLUS_STEP } };
            if resized <= 1e-9 {
                out.actions.remove(i);
            } else {
                out.actions[i].kind = ActionKind::Bolus { units: round3(resized) };
            }
        }
    }
    let out = out.canonicalize();
    (out != *plan && out.validate().is_ok()).then_some(out)
}

fn random_neighbor(plan: &UsagePlan, ctx: &PlanContext, rng: &mut ChaCha8Rng) -> UsagePlan {
    // the move set always contains an applicable edit (basal/isf/cr scaling)
    loop {
        if let Some(p) = random_move(plan, ctx, rng) {
            return p;
        }
    }
}

/// [`Planner`] wrapper: the seed plan first, then single-move neighbours of the
/// best plan in the history.
#[derive(Debug, Clone)]
pub struct LocalSearchPlanner {
    rng: ChaCha8Rng,
}

impl LocalSearchPlanner {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Planner for LocalSearchPlanner {
    fn propose(&mut self, context: &PlanContext, history: &RefinementLog) -> Result<UsagePlan, PlannerError> {
        match history.best() {
            None => Ok(context.seed_plan()),
            Some(best) => Ok(random_neighbor(&best.plan, context, &mut self.rng)),
        }
    }
}

/// Hill-climbs from the context's status-quo plan; returns the best plan found
/// and the log of every simulated candidate.
pub fn local_search_refine(
    context: &PlanContext,
    config: &LocalSearchConfig,
) -> Result<(UsagePlan, RefinementLog), PlannerError> {
    local_search_refine_observed(context, config, &mut |_| {})
}

/// [`local_search_refine`], calling `observer` with each logged iteration as it happens.
pub fn local_search_refine_observed(
    context: &PlanContext,
    config: &LocalSearchConfig,
    observer: &mut dyn FnMut(&Iteration),
) -> Result<(UsagePlan, RefinementLog), PlannerError> {
    if config.budget == 0 {
        return Err(PlannerError::InvalidContext("budget must be at least 1".into()));
    }
    let seed = context.seed_plan();
    let violations = check_feasibility(&seed, &context.constraints);
    if let Some(v) = violations.first() {
        return Err(PlannerError::InfeasibleContext(v.message.clone()));
    }
    let (trace, quality) =
        evaluate_plan(context, &seed).map_err(|e| PlannerError::InfeasibleContext(alloc::format!("seed plan: {e}")))?;
    let mut log = RefinementLog::new();
    log.record(1, seed, quality, quality_feedback(context, &trace, &quality));
    observer(&log.iterations[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stale = 0;
    for index in 2..=config.budget {
        let best = log.best().expect("seed is logged");
        if config.stop_when_safe && best.quality.is_safe() {
            break;
        }
        let candidate = if stale >= config.patience {
            stale = 0;
            let mut p = best.plan.clone();
            for _ in 0..config.kick_moves.max(1) {
                p = random_neighbor(&p, context, &mut rng);
            }
            p
        } else {
            random_neighbor(&best.plan, context, &mut rng)
        };
        if !check_feasibility(&candidate, &context.constraints).is_empty() {
            stale += 1;
            continue;
        }
        let Ok((trace, quality)) = evaluate_plan(context, &candidate) else {
            stale += 1;
            continue;
        };
        let feedback = quality_feedback(context, &trace, &quality);
        let accepted = log.record(index, candidate, quality, feedback);
        observer(log.iterations.last().expect("just logged"));
        stale = if accepted { 0 } else { stale + 1 };
    }
    let best = log.best().expect("seed is logged");
    let plan = best.plan.clone();
    log.stop_reason = if best.quality.is_safe() { StopReason::Safe } else { StopReason::Budget };
    Ok((plan, log))
}
