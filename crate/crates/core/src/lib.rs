//! Patient-specific glucose-insulin digital twin for automated insulin delivery (AID)
//! usage-plan design.
//!
//! The crate is `no_std` with `alloc`. It contains the numerical engine only:
//!
//! - [`model`]: extended Bergman minimal model (plasma glucose, remote insulin action,
//!   plasma insulin, two-compartment gut, exercise uptake) integrated with fixed-step RK4.
//! - [`plan`]: usage plans (time-aligned AID settings plus meal/bolus actions), the plan
//!   text format, and the pump semantics that turn a plan into insulin inputs.
//! - [`scenario`]: meal and exercise events the plan is simulated against.
//! - [`safety`]: quantitative signal temporal logic robustness, glycemic metrics and the
//!   plan quality score.
//! - [`ident`]: fitting a twin to CGM/pump records and identifiability diagnostics.
//! - [`planner`]: the propose/simulate/score/feedback refinement loop with a local-search
//!   planner and the response handling used by remote (LLM) planners.
//!
//! IO, file loading, the HTTP service and the CLI live in the companion `aidtwin` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]
// `!(a < b)` comparisons deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod ident;
pub mod model;
pub mod plan;
pub mod planner;
pub mod safety;
pub mod scenario;

mod linalg;
mod text;

pub use ident::{fit, identifiability, Bounds, FitConfig, FitResult, Identifiability, ParamId, UsageRecord};
pub use model::{
    derivatives, simulate, step, GlucoseTrace, PatientParams, SimConfig, StateDerivative, TwinError, TwinState,
};
pub use plan::{bolus_dose, ActionKind, ConfigSegment, PlanAction, UsagePlan};
pub use planner::{
    check_feasibility, FeasibilityConstraints, HallucinationCounter, LocalSearchConfig, PlanContext, RefinementLog,
    StopReason,
};
pub use safety::{glycemic_metrics, quality_score, robustness, PlanQuality, ScoreWeights, StlFormula};
pub use scenario::{ExerciseBout, InitialCondition, Meal, Scenario};
pub use text::{Violation, Violations};
