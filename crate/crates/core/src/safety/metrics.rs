use crate::model::GlucoseTrace;

/// Standard glycemic target band (mg/dL).
pub const TARGET_BAND: (f64, f64) = (70.0, 180.0);
/// Minimum fraction of the day in range for adequate control.
pub const TIR_GOAL: f64 = 0.70;
/// mg/dL
pub const HYPO_THRESHOLD: f64 = 70.0;
/// mg/dL
pub const SEVERE_HYPO_THRESHOLD: f64 = 54.0;
/// Minimum duration of a counted episode (min).
pub const EPISODE_MIN_DURATION: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid band: lo={lo} must be below hi={hi}")]
    InvalidBand { lo: f64, hi: f64 },
    #[error("trace has no samples")]
    EmptyTrace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GlycemicMetrics {
    /// Fraction of samples with `lo <= G <= hi`.
    pub tir: f64,
    /// Fraction of samples above `hi`.
    pub tar: f64,
    /// Fraction of samples below `lo`.
    pub tbr: f64,
    pub mean_glucose: f64,
    pub hypo_episodes: u32,
    pub severe_hypo_episodes: u32,
}

/// Number of maximal runs below `threshold` lasting at least `min_duration`
/// minutes, where a run of `k` samples spans `(k - 1)·dt`.
pub fn count_episodes(trace: &GlucoseTrace, threshold: f64, min_duration: f64) -> u32 {
    let mut count = 0;
    let mut run = 0usize;
    let mut close = |run: usize| {
        if run > 0 && (run - 1) as f64 * trace.dt >= min_duration - 1e-9 {
            count += 1;
        }
    };
    for &g in &trace.samples {
        if g < threshold {
            run += 1;
        } else {
            close(run);
            run = 0;
        }
    }
    close(run);
    count
}

pub fn glycemic_metrics(trace: &GlucoseTrace, lo: f64, hi: f64) -> Result<GlycemicMetrics, MetricsError> {
    if !(lo < hi) {
        return Err(MetricsError::InvalidBand { lo, hi });
    }
    if trace.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let n = trace.len();
    let (mut below, mut inside, mut above) = (0usize, 0usize, 0usize);
    for &g in &trace.samples {
        if g < lo {
            below += 1;
        } else if g > hi {
            above += 1;
        } else {
            inside += 1;
        }
    }
    let nf = n as f64;
    Ok(GlycemicMetrics {
        tir: inside as f64 / nf,
        tar: above as f64 / nf,
        tbr: below as f64 / nf,
        mean_glucose: trace.samples.iter().sum::<f64>() / nf,
        hypo_episodes: count_episodes(trace, HYPO_THRESHOLD, EPISODE_MIN_DURATION),
        severe_hypo_episodes: count_episodes(trace, SEVERE_HYPO_THRESHOLD, EPISODE_MIN_DURATION),
    })
}

/// Weights of the scalar plan quality score.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreWeights {
    pub tir: f64,
    pub robustness: f64,
    /// Robustness above this no longer adds to the score (mg/dL).
    pub robustness_cap: f64,
    /// Multiplier on negative robustness.
    pub penalty: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { tir: 100.0, robustness: 1.0, robustness_cap: 50.0, penalty: 100.0 }
    }
}

/// Safe plans score `w_tir·tir + w_rho·min(rho, cap)`; unsafe plans score
/// `penalty·rho`, which is negative and so below every safe score.
pub fn quality_score(metrics: &GlycemicMetrics, rho: f64, weights: &ScoreWeights) -> f64 {
    if rho >= 0.0 {
        weights.tir * metrics.tir + weights.robustness * rho.min(weights.robustness_cap)
    } else {
        weights.penalty * rho
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn trace(samples: alloc::vec::Vec<f64>, dt: f64) -> GlucoseTrace {
        GlucoseTrace::new(0.0, dt, samples).unwrap()
    }

    #[test]
    fn hand_count() {
        let m = glycemic_metrics(&trace(vec![60.0, 100.0, 150.0, 200.0], 5.0), 70.0, 180.0).unwrap();
        assert_eq!((m.tir, m.tar, m.tbr), (0.5, 0.25, 0.25));
        assert_eq!(m.mean_glucose, 127.5);
    }

    #[test]
    fn constant_in_range() {
        let m = glycemic_metrics(&trace(vec![100.0; 12], 5.0), 70.0, 180.0).unwrap();
        assert_eq!(
            m,
            GlycemicMetrics {
                tir: 1.0,
                tar: 0.0,
                tbr: 0.0,
                mean_glucose: 100.0,
                hypo_episodes: 0,
                severe_hypo_episodes: 0
            }
        );
    }

    #[test]
    fn episode_duration_rule() {
        assert_eq!(count_episodes(&trace(vec![65.0; 3], 5.0), 70.0, 15.0), 0);
        assert_eq!(count_episodes(&trace(vec![65.0; 4], 5.0), 70.0, 15.0), 1);
        let two = vec![50.0, 50.0, 50.0, 50.0, 100.0, 60.0, 60.0, 60.0, 60.0, 60.0];
        let m = glycemic_metrics(&trace(two, 5.0), 70.0, 180.0).unwrap();
        assert_eq!((m.hypo_episodes, m.severe_hypo_episodes), (2, 1));
    }

    #[test]
    fn bad_band() {
        let tr = trace(vec![100.0], 5.0);
        assert_eq!(glycemic_metrics(&tr, 180.0, 70.0), Err(MetricsError::InvalidBand { lo: 180.0, hi: 70.0 }));
        assert!(glycemic_metrics(&tr, 70.0, 70.0).is_err());
    }

    #[test]
    fn score_formula() {
        let w = ScoreWeights::default();
        let m = |tir| GlycemicMetrics {
            tir,
            tar: 0.0,
            tbr: 0.0,
            mean_glucose: 0.0,
            hypo_episodes: 0,
            severe_hypo_episodes: 0,
        };
        assert_eq!(quality_score(&m(1.0), -5.0, &w), -500.0);
        assert!((quality_score(&m(0.7), 0.0, &w) - 70.0).abs() < 1e-12);
        assert_eq!(quality_score(&m(1.0), 80.0, &w), 150.0);
    }
}
