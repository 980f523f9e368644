//! Safety evaluation of a simulated plan: STL robustness, glycemic metrics and
//! the scalar quality score that drives plan refinement.

mod metrics;
mod stl;

pub use metrics::{
    count_episodes, glycemic_metrics, quality_score, GlycemicMetrics, MetricsError, ScoreWeights, EPISODE_MIN_DURATION,
    HYPO_THRESHOLD, SEVERE_HYPO_THRESHOLD, TARGET_BAND, TIR_GOAL,
};
pub use stl::{robustness, robustness_signal, StlError, StlFormula};

use crate::model::GlucoseTrace;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SafetyError {
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Metric bundle and score of one evaluated plan.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanQuality {
    /// Robustness of the safety formula at the trace start (mg/dL).
    pub robustness: f64,
    pub tir: f64,
    pub tar: f64,
    pub tbr: f64,
    pub mean_glucose: f64,
    pub hypo_episodes: u32,
    pub severe_hypo_episodes: u32,
    pub score: f64,
}

impl PlanQuality {
    pub fn is_safe(&self) -> bool {
        self.robustness >= 0.0
    }

    pub fn metrics(&self) -> GlycemicMetrics {
        GlycemicMetrics {
            tir: self.tir,
            tar: self.tar,
            tbr: self.tbr,
            mean_glucose: self.mean_glucose,
            hypo_episodes: self.hypo_episodes,
            severe_hypo_episodes: self.severe_hypo_episodes,
        }
    }
}

/// Scores `trace` against `spec` (evaluated at the first sample) with the
/// standard 70–180 mg/dL band.
pub fn evaluate_trace(
    trace: &GlucoseTrace,
    spec: &StlFormula,
    weights: &ScoreWeights,
) -> Result<PlanQuality, SafetyError> {
    let rho = robustness(spec, trace, trace.t0)?;
    let m = glycemic_metrics(trace, TARGET_BAND.0, TARGET_BAND.1)?;
    Ok(PlanQuality {
        robustness: rho,
        tir: m.tir,
        tar: m.tar,
        tbr: m.tbr,
        mean_glucose: m.mean_glucose,
        hypo_episodes: m.hypo_episodes,
        severe_hypo_episodes: m.severe_hypo_episodes,
        score: quality_score(&m, rho, weights),
    })
}
