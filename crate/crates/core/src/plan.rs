//! Usage plans: time-aligned AID configuration segments plus meal announcements and
//! manual boluses, their text format, and the pump semantics that turn a plan into
//! insulin inputs.
//!
//! Text format, one record per line, `#` lines are comments:
//!
//! ```text
//! segment <start_min> <end_min> basal=<U/h> isf=<mg/dL-per-U> cr=<g-per-U> target=<mg/dL>
//! meal <time_min> carbs=<g>
//! bolus <time_min> units=<U>
//! suspend <mg/dL>
//! ```
//!
//! A meal announcement means the carbs are eaten and announced to the bolus
//! calculator; unannounced meals belong in the [`Scenario`](crate::Scenario).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt::Write;

use crate::model::MICRO_UNITS_PER_UNIT;
use crate::text::{fmt_number, records, Violation, Violations};

/// Allowed correction target range (mg/dL).
pub const TARGET_RANGE: (f64, f64) = (70.0, 200.0);
/// Carbohydrate ratios outside this range (g/U) draw a lint warning.
pub const TYPICAL_CR: (f64, f64) = (2.0, 30.0);

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfigSegment {
    /// min
    pub start: f64,
    /// U/h
    pub basal: f64,
    /// mg/dL per U
    pub isf: f64,
    /// g per U
    pub cr: f64,
    /// mg/dL
    pub target: f64,
}

impl ConfigSegment {
    fn check(&self, out: &mut Vec<String>) {
        if !(self.basal.is_finite() && self.basal >= 0.0) {
            out.push(format!("basal must be >= 0, got {}", self.basal));
        }
        if !(self.isf.is_finite() && self.isf > 0.0) {
            out.push(format!("isf must be > 0, got {}", self.isf));
        }
        if !(self.cr.is_finite() && self.cr > 0.0) {
            out.push(format!("cr must be > 0, got {}", self.cr));
        }
        if !(self.target >= TARGET_RANGE.0 && self.target <= TARGET_RANGE.1) {
            out.push(format!("target must be in [{}, {}], got {}", TARGET_RANGE.0, TARGET_RANGE.1, self.target));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ActionKind {
    /// Announced meal (g carbohydrate); triggers the bolus calculator.
    Meal { carbs: f64 },
    /// Manual bolus (U), delivered verbatim.
    Bolus { units: f64 },
}

impl ActionKind {
    fn rank(&self) -> u8 {
        match self {
            ActionKind::Meal { .. } => 0,
            ActionKind::Bolus { .. } => 1,
        }
    }

    fn amount(&self) -> f64 {
        match *self {
            ActionKind::Meal { carbs } => carbs,
            ActionKind::Bolus { units } => units,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanAction {
    /// min
    pub time: f64,
    pub kind: ActionKind,
}

impl PlanAction {
    pub fn meal(time: f64, carbs: f64) -> Self {
        Self { time, kind: ActionKind::Meal { carbs } }
    }

    pub fn bolus(time: f64, units: f64) -> Self {
        Self { time, kind: ActionKind::Bolus { units } }
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.kind.amount().total_cmp(&other.kind.amount()))
    }
}

/// Segments are contiguous: each runs until the next one starts, the last one
/// until `horizon`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UsagePlan {
    pub segments: Vec<ConfigSegment>,
    pub actions: Vec<PlanAction>,
    /// min
    pub horizon: f64,
    /// Basal is withheld while glucose is below this (mg/dL).
    pub suspend_threshold: Option<f64>,
}

/// One discrete insulin delivery requested by the plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BolusEvent {
    pub units: f64,
    /// Index into [`UsagePlan::actions`].
    pub action: usize,
}

/// What the pump does at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct InsulinInput {
    /// Continuous delivery (µU/min).
    pub basal: f64,
    pub boluses: Vec<BolusEvent>,
}

/// Meal plus correction dose: `carbs/cr + max(0, (glucose - target)/isf)`.
pub fn bolus_dose(carbs: f64, glucose: f64, segment: &ConfigSegment) -> f64 {
    carbs / segment.cr + ((glucose - segment.target) / segment.isf).max(0.0)
}

impl UsagePlan {
    /// One segment with `settings` over `[0, horizon]`, no actions.
    pub fn constant(settings: ConfigSegment, horizon: f64) -> Self {
        Self {
            segments: alloc::vec![ConfigSegment { start: 0.0, ..settings }],
            actions: Vec::new(),
            horizon,
            suspend_threshold: None,
        }
    }

    pub fn segment_end(&self, idx: usize) -> f64 {
        self.segments.get(idx + 1).map_or(self.horizon, |s| s.start)
    }

    /// Active segment at `t`; `None` outside `[0, horizon]`.
    pub fn segment_at(&self, t: f64) -> Option<&ConfigSegment> {
        self.segment_index_at(t).map(|i| &self.segments[i])
    }

    pub fn segment_index_at(&self, t: f64) -> Option<usize> {
        if !(t >= 0.0 && t <= self.horizon) {
            return None;
        }
        self.segments.iter().rposition(|s| s.start <= t)
    }

    /// Basal rate in U/h at `t` for the current glucose, with suspend applied.
    pub fn basal_rate(&self, t: f64, glucose: f64) -> Option<f64> {
        let seg = self.segment_at(t)?;
        match self.suspend_threshold {
            Some(th) if glucose < th => Some(0.0),
            _ => Some(seg.basal),
        }
    }

    /// Continuous rate (µU/min) and discrete boluses due exactly at `t`.
    pub fn insulin_input(&self, t: f64, glucose: f64) -> Result<InsulinInput, crate::TwinError> {
        let seg = self.segment_at(t).ok_or(crate::TwinError::PlanCoverage { t })?;
        let basal = self.basal_rate(t, glucose).unwrap_or(0.0) * MICRO_UNITS_PER_UNIT / 60.0;
        let boluses = self
            .actions
            .iter()
            .enumerate()
            .filter(|(_, a)| (a.time - t).abs() <= 1e-9)
            .map(|(i, a)| {
                let units = match a.kind {
                    ActionKind::Meal { carbs } => bolus_dose(carbs, glucose, seg),
                    ActionKind::Bolus { units } => units,
                };
                BolusEvent { units, action: i }
            })
            .collect();
        Ok(InsulinInput { basal, boluses })
    }

    pub fn meal_count(&self) -> usize {
        self.actions.iter().filter(|a| matches!(a.kind, ActionKind::Meal { .. })).count()
    }

    pub fn bolus_count(&self) -> usize {
        self.actions.iter().filter(|a| matches!(a.kind, ActionKind::Bolus { .. })).count()
    }

    /// Sorted segments and actions.
    pub fn canonicalize(&self) -> Self {
        let mut out = self.clone();
        out.segments.sort_by(|a, b| a.start.total_cmp(&b.start));
        out.actions.sort_by(PlanAction::canonical_cmp);
        out
    }

    pub fn validate(&self) -> Result<(), Violations> {
        let mut out = Vec::new();
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            out.push(Violation::general(format!("horizon must be > 0, got {}", self.horizon)));
        }
        match self.segments.first() {
            None => out.push(Violation::general("plan has no segments")),
            Some(first) if first.start != 0.0 => {
                out.push(Violation::general(format!("first segment starts at {} instead of 0", first.start)))
            }
            _ => {}
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let end = self.segment_end(i);
            let mut msgs = Vec::new();
            seg.check(&mut msgs);
            if !(end > seg.start) {
                msgs.push(format!("segment ends at {end}, not after its start"));
            }
            for m in msgs {
                out.push(Violation::general(format!("segment {}-{}: {m}", fmt_number(seg.start), fmt_number(end))));
            }
        }
        for a in &self.actions {
            check_action(a, self.horizon, &mut |m| out.push(Violation::general(m)));
        }
        if self.actions.windows(2).any(|w| w[0].time > w[1].time) {
            out.push(Violation::general("actions are not in time order"));
        }
        if let Some(th) = self.suspend_threshold {
            if !(th.is_finite() && th > 0.0) {
                out.push(Violation::general(format!("suspend threshold must be > 0, got {th}")));
            }
        }
        Violations::check(out)
    }

    /// Non-fatal warnings (currently: carbohydrate ratios outside the usual range).
    pub fn lint(&self) -> Vec<String> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.cr < TYPICAL_CR.0 || s.cr > TYPICAL_CR.1)
            .map(|(i, s)| {
                format!(
                    "segment {}-{}: cr={} g/U is outside the typical range [{}, {}]",
                    fmt_number(s.start),
                    fmt_number(self.segment_end(i)),
                    fmt_number(s.cr),
                    TYPICAL_CR.0,
                    TYPICAL_CR.1
                )
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, Violations> {
        parse_plan(text)
    }

    pub fn to_text(&self) -> String {
        serialize_plan(self)
    }
}

fn check_action(a: &PlanAction, horizon: f64, report: &mut dyn FnMut(String)) {
    let t = fmt_number(a.time);
    if !(a.time >= 0.0 && a.time <= horizon) {
        report(format!("action at {t} lies outside the plan horizon [0, {}]", fmt_number(horizon)));
    }
    match a.kind {
        ActionKind::Meal { carbs } if !(carbs.is_finite() && carbs > 0.0) => {
            report(format!("meal at {t}: carbs must be > 0, got {carbs}"))
        }
        ActionKind::Bolus { units } if !(units.is_finite() && units > 0.0) => {
            report(format!("bolus at {t}: units must be > 0, got {units}"))
        }
        _ => {}
    }
}

/// Reads the plan text format. Every problem is reported with its line; the
/// result is canonical (sorted segments and actions).
pub fn parse_plan(text: &str) -> Result<UsagePlan, Violations> {
    let mut errors = Vec::new();
    let mut segments: Vec<(usize, f64, ConfigSegment)> = Vec::new();
    let mut actions: Vec<(usize, PlanAction)> = Vec::new();
    let mut suspend: Option<(usize, f64)> = None;

    for rec in records(text) {
        let line = rec.line;
        let parsed: Result<(), String> = (|| {
            match rec.keyword {
                "segment" => {
                    rec.expect_shape(2, &["basal", "isf", "cr", "target"])?;
                    let start = rec.number_at(0, "start")?;
                    let end = rec.number_at(1, "end")?;
                    let seg = ConfigSegment {
                        start,
                        basal: rec.named_number("basal")?,
                        isf: rec.named_number("isf")?,
                        cr: rec.named_number("cr")?,
                        target: rec.named_number("target")?,
                    };
                    segments.push((line, end, seg));
                }
                "meal" => {
                    rec.expect_shape(1, &["carbs"])?;
                    actions.push((line, PlanAction::meal(rec.number_at(0, "time")?, rec.named_number("carbs")?)));
                }
                "bolus" => {
                    rec.expect_shape(1, &["units"])?;
                    actions.push((line, PlanAction::bolus(rec.number_at(0, "time")?, rec.named_number("units")?)));
                }
                "suspend" => {
                    rec.expect_shape(1, &[])?;
                    if let Some((prev, _)) = suspend {
                        return Err(format!("duplicate `suspend` (first on line {prev})"));
                    }
                    suspend = Some((line, rec.number_at(0, "threshold")?));
                }
                other => return Err(format!("unknown record `{other}`")),
            }
            Ok(())
        })();
        if let Err(msg) = parsed {
            errors.push(Violation::at(line, msg));
        }
    }

    segments.sort_by(|a, b| a.2.start.total_cmp(&b.2.start));
    if segments.is_empty() && errors.is_empty() {
        errors.push(Violation::general("plan has no segments"));
    }
    for (i, (line, end, seg)) in segments.iter().enumerate() {
        let mut msgs = Vec::new();
        seg.check(&mut msgs);
        if !(*end > seg.start) {
            msgs.push(format!("end {} is not after start {}", fmt_number(*end), fmt_number(seg.start)));
        }
        if i == 0 && seg.start != 0.0 {
            msgs.push(format!("first segment starts at {} instead of 0", fmt_number(seg.start)));
        }
        if let Some((next_line, _, next)) = segments.get(i + 1) {
            match next.start.total_cmp(end) {
                Ordering::Greater => msgs.push(format!(
                    "coverage gap [{}, {}] before the segment on line {next_line}",
                    fmt_number(*end),
                    fmt_number(next.start)
                )),
                Ordering::Less => msgs.push(format!(
                    "overlaps the segment on line {next_line} over [{}, {}]",
                    fmt_number(next.start),
                    fmt_number(end.min(segments[i + 1].1))
                )),
                Ordering::Equal => {}
            }
        }
        for m in msgs {
            errors.push(Violation::at(*line, m));
        }
    }
    let horizon = segments.last().map_or(0.0, |s| s.1);
    for (line, a) in &actions {
        check_action(a, horizon, &mut |m| errors.push(Violation::at(*line, m)));
    }
    if let Some((line, th)) = suspend {
        if th <= 0.0 {
            errors.push(Violation::at(line, format!("suspend threshold must be > 0, got {th}")));
        }
    }
    errors.sort_by_key(|v| v.line.unwrap_or(0));
    Violations::check(errors)?;

    let mut actions: Vec<PlanAction> = actions.into_iter().map(|(_, a)| a).collect();
    actions.sort_by(PlanAction::canonical_cmp);
    Ok(UsagePlan {
        segments: segments.into_iter().map(|(_, _, s)| s).collect(),
        actions,
        horizon,
        suspend_threshold: suspend.map(|(_, th)| th),
    })
}

/// Canonical text form: segments, then actions in time order, then `suspend`.
pub fn serialize_plan(plan: &UsagePlan) -> String {
    let plan = plan.canonicalize();
    let mut out = String::new();
    for (i, s) in plan.segments.iter().enumerate() {
        let _ = writeln!(
            out,
            "segment {} {} basal={} isf={} cr={} target={}",
            fmt_number(s.start),
            fmt_number(plan.segment_end(i)),
            fmt_number(s.basal),
            fmt_number(s.isf),
            fmt_number(s.cr),
            fmt_number(s.target)
        );
    }
    for a in &plan.actions {
        let _ = match a.kind {
            ActionKind::Meal { carbs } => writeln!(out, "meal {} carbs={}", fmt_number(a.time), fmt_number(carbs)),
            ActionKind::Bolus { units } => writeln!(out, "bolus {} units={}", fmt_number(a.time), fmt_number(units)),
        };
    }
    if let Some(th) = plan.suspend_threshold {
        let _ = writeln!(out, "suspend {}", fmt_number(th));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn seg(cr: f64, isf: f64, target: f64) -> ConfigSegment {
        ConfigSegment { start: 0.0, basal: 1.0, isf, cr, target }
    }

    #[test]
    fn bolus_calculator() {
        assert_eq!(bolus_dose(50.0, 170.0, &seg(10.0, 50.0, 120.0)), 6.0);
        assert_eq!(bolus_dose(0.0, 120.0, &seg(10.0, 50.0, 120.0)), 0.0);
        assert_eq!(bolus_dose(0.0, 90.0, &seg(10.0, 50.0, 120.0)), 0.0);
    }

    #[test]
    fn pump_input() {
        let mut plan = UsagePlan::constant(seg(10.0, 50.0, 120.0), 60.0);
        plan.suspend_threshold = Some(70.0);
        plan.actions.push(PlanAction::meal(30.0, 30.0));
        let at = plan.insulin_input(10.0, 100.0).unwrap();
        assert!((at.basal - 1.0e6 / 60.0).abs() < 1e-9);
        assert!(at.boluses.is_empty());
        assert_eq!(plan.insulin_input(10.0, 65.0).unwrap().basal, 0.0);
        let meal = plan.insulin_input(30.0, 120.0).unwrap();
        assert_eq!(meal.boluses, [BolusEvent { units: 3.0, action: 0 }]);
        assert!(matches!(plan.insulin_input(61.0, 100.0), Err(crate::TwinError::PlanCoverage { .. })));
    }

    #[test]
    fn minimal_plan() {
        let p = parse_plan("segment 0 90 basal=0.8 isf=50 cr=10 target=110\n").unwrap();
        assert_eq!(p.horizon, 90.0);
        assert_eq!(p.segments.len(), 1);
        assert!(p.actions.is_empty());
        assert_eq!(p.suspend_threshold, None);
    }

    #[test]
    fn prompt_settings_round_trip() {
        let text = "segment 0 60 basal=1 isf=50 cr=0.36 target=120\n";
        let p = parse_plan(text).unwrap();
        assert_eq!(p.segments[0].isf, 50.0);
        assert_eq!(p.segments[0].cr, 0.36);
        assert_eq!(serialize_plan(&p), text);
        assert_eq!(p.lint().len(), 1);
    }

    #[test]
    fn gap_is_named() {
        let err = parse_plan(
            "segment 0 60 basal=1 isf=50 cr=10 target=120\nsegment 70 120 basal=1 isf=50 cr=10 target=120\n",
        )
        .unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].line, Some(1));
        assert!(err.0[0].message.contains("gap [60, 70]"), "{err}");
    }

    #[test]
    fn every_violation_is_listed() {
        let text = "segment 0 60 basal=-1 isf=0 cr=10 target=120\n\
                    segment 50 120 basal=1 isf=50 cr=10 target=300\n\
                    bolus 200 units=1\n\
                    meal 10 carbs=-5\n\
                    dance 5\n\
                    suspend 70\nsuspend 80\n";
        let err = parse_plan(text).unwrap_err();
        let lines: Vec<_> = err.0.iter().map(|v| v.line.unwrap()).collect();
        assert_eq!(lines, [1, 1, 1, 2, 3, 4, 5, 7], "{err}");
        assert!(err.to_string().contains("overlaps"));
    }

    #[test]
    fn validate_structured() {
        let mut p = UsagePlan::constant(seg(10.0, 50.0, 120.0), 60.0);
        assert!(p.validate().is_ok());
        p.segments[0].start = 5.0;
        p.actions.push(PlanAction::bolus(90.0, 1.0));
        assert_eq!(p.validate().unwrap_err().0.len(), 2);
    }
}
