use aidtwin_core::model::{simulate_detailed, SimConfig};
use aidtwin_core::{
    simulate, step, ConfigSegment, ExerciseBout, GlucoseTrace, Meal, PatientParams, PlanAction, Scenario, TwinError,
    TwinState, UsagePlan,
};
use proptest::prelude::*;

fn params() -> PatientParams {
    PatientParams::NOMINAL_ADULT
}

fn basal_plan(p: &PatientParams, horizon: f64) -> UsagePlan {
    UsagePlan::constant(
        ConfigSegment { start: 0.0, basal: p.equilibrium_basal(), isf: 50.0, cr: 10.0, target: 120.0 },
        horizon,
    )
}

fn busy_scenario() -> Scenario {
    Scenario {
        meals: vec![Meal { time: 60.0, carbs: 40.0 }],
        exercise: vec![ExerciseBout { start: 120.0, duration: 40.0, intensity: 0.6 }],
        ..Scenario::empty(240.0).with_initial_glucose(160.0)
    }
}

fn max_abs_diff(a: &GlucoseTrace, b: &GlucoseTrace) -> f64 {
    assert_eq!(a.len(), b.len());
    a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn rk4_matches_the_scalar_oracle() {
    // with I = Ib and X = 0 the glucose equation is dG/dt = -p1 (G - Gb); one RK4
    // step of length 1 with p1 = 0.1 scales the excess by the fourth-order Taylor
    // polynomial of exp(-0.1)
    let p = PatientParams { p1: 0.1, gb: 100.0, ..params() };
    let s = TwinState { glucose: 200.0, ..p.equilibrium_state() };
    let next = step(&s, &p, p.equilibrium_insulin_rate(), 0.0, 1.0).unwrap();
    assert!((next.glucose - 100.0 - 90.48375).abs() < 1e-9, "{}", next.glucose);
    assert_eq!(next.t, 1.0);
}

#[test]
fn equilibrium_holds_for_a_day() {
    let p = params();
    let trace = simulate(&p, &basal_plan(&p, 1440.0), &Scenario::empty(1440.0), &SimConfig::dense(1.0)).unwrap();
    assert_eq!(trace.len(), 1441);
    let worst = trace.samples.iter().map(|g| (g - p.gb).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "drift {worst}");
}

#[test]
fn fourth_order_convergence() {
    let p = params();
    let mut plan = basal_plan(&p, 240.0);
    plan.actions.push(PlanAction::bolus(60.0, 3.0));
    // every event and exercise kink (start, end, end of washout) sits on the
    // coarsest grid, otherwise the dt = 4 run is not yet in the asymptotic range
    let scenario = busy_scenario();
    let run = |dt: f64| {
        let config = SimConfig { dt, sample_interval: 4.0, ..SimConfig::default() };
        simulate(&p, &plan, &scenario, &config).unwrap()
    };
    let reference = run(1.0 / 64.0);
    let errors: Vec<f64> = [4.0, 2.0, 1.0, 0.5].iter().map(|&dt| max_abs_diff(&run(dt), &reference)).collect();
    for pair in errors.windows(2) {
        let order = (pair[0] / pair[1]).log2();
        assert!((3.5..=4.5).contains(&order), "errors {errors:?}, order {order}");
    }
}

#[test]
fn unannounced_meal_has_one_peak() {
    let p = params();
    let scenario = Scenario { meals: vec![Meal { time: 30.0, carbs: 50.0 }], ..Scenario::empty(600.0) };
    let trace = simulate(&p, &basal_plan(&p, 600.0), &scenario, &SimConfig::default()).unwrap();
    let g = &trace.samples;
    let peak = g.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert!(g[peak] > p.gb + 20.0);
    assert!(g[..=peak].windows(2).all(|w| w[1] >= w[0]), "not rising before the peak");
    assert!(g[peak..].windows(2).all(|w| w[1] <= w[0]), "not falling after the peak");
}

#[test]
fn exercise_lowers_glucose() {
    let p = params();
    let plan = basal_plan(&p, 240.0);
    let rest = Scenario::empty(240.0).with_initial_glucose(140.0);
    let run = Scenario { exercise: vec![ExerciseBout { start: 30.0, duration: 45.0, intensity: 0.7 }], ..rest.clone() };
    let a = simulate(&p, &plan, &rest, &SimConfig::default()).unwrap();
    let b = simulate(&p, &plan, &run, &SimConfig::default()).unwrap();
    assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| y <= x));
    let gap = a.samples.iter().zip(&b.samples).map(|(x, y)| x - y).fold(0.0, f64::max);
    assert!(gap > 10.0, "gap {gap}");
}

#[test]
fn carbohydrate_is_conserved() {
    let p = params();
    let scenario = Scenario {
        meals: vec![Meal { time: 10.0, carbs: 50.0 }, Meal { time: 200.0, carbs: 20.0 }],
        ..Scenario::empty(480.0)
    };
    let mut plan = basal_plan(&p, 480.0);
    plan.actions.push(PlanAction::meal(100.0, 30.0));
    let sim = simulate_detailed(&p, &plan, &scenario, &SimConfig::default()).unwrap();
    let last = sim.states.last().unwrap();
    let accounted = sim.carbs_absorbed + last.gut1 + last.gut2;
    assert_eq!(sim.carbs_ingested, 100_000.0);
    assert!((accounted - sim.carbs_ingested).abs() <= 1e-3 * sim.carbs_ingested, "{accounted}");
}

#[test]
fn bigger_bolus_never_raises_glucose() {
    let p = params();
    let scenario = busy_scenario();
    let with = |units: f64| {
        let mut plan = basal_plan(&p, 240.0);
        plan.actions.push(PlanAction::bolus(50.0, units));
        simulate(&p, &plan, &scenario, &SimConfig::default()).unwrap()
    };
    let (small, large) = (with(2.0), with(3.0));
    assert!(small.samples.iter().zip(&large.samples).all(|(s, l)| l <= s));
    let nadir = |t: &GlucoseTrace| t.samples.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(nadir(&large) < nadir(&small));
    assert!((large.total_insulin() - small.total_insulin() - 1.0).abs() < 1e-9);
}

#[test]
fn suspend_never_lowers_glucose() {
    let p = params();
    let scenario = Scenario {
        exercise: vec![ExerciseBout { start: 20.0, duration: 60.0, intensity: 1.0 }],
        ..Scenario::empty(240.0).with_initial_glucose(100.0)
    };
    let mut plan = basal_plan(&p, 240.0);
    plan.segments[0].basal = 1.5;
    let plain = simulate(&p, &plan, &scenario, &SimConfig::default()).unwrap();
    plan.suspend_threshold = Some(80.0);
    let suspended = simulate(&p, &plan, &scenario, &SimConfig::default()).unwrap();
    assert!(plain.samples.iter().zip(&suspended.samples).all(|(a, b)| b >= a));
    assert!(suspended.total_insulin() < plain.total_insulin());
}

#[test]
fn simulation_is_deterministic() {
    let p = params();
    let mut plan = basal_plan(&p, 240.0);
    plan.actions.push(PlanAction::meal(90.0, 45.0));
    let a = simulate_detailed(&p, &plan, &busy_scenario(), &SimConfig::default()).unwrap();
    let b = simulate_detailed(&p, &plan, &busy_scenario(), &SimConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn plan_must_cover_the_horizon() {
    let p = params();
    let err = simulate(&p, &basal_plan(&p, 120.0), &Scenario::empty(240.0), &SimConfig::default()).unwrap_err();
    assert_eq!(err, TwinError::PlanCoverage { t: 120.0 });
}

#[test]
fn bad_step_sizes_are_rejected() {
    let p = params();
    let plan = basal_plan(&p, 240.0);
    let s = Scenario::empty(240.0);
    for config in [
        SimConfig::with_dt(0.0),
        SimConfig::with_dt(6.0),
        SimConfig { dt: 2.0, sample_interval: 5.0, ..SimConfig::default() },
    ] {
        assert!(matches!(simulate(&p, &plan, &s, &config), Err(TwinError::InvalidConfig(_))), "{config:?}");
    }
}

#[test]
fn invalid_parameters_are_rejected() {
    let p = PatientParams { p2: -0.1, ..params() };
    let err = simulate(&p, &basal_plan(&p, 60.0), &Scenario::empty(60.0), &SimConfig::default()).unwrap_err();
    assert!(matches!(err, TwinError::InvalidParams(ref m) if m.contains("p2")), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bolus_scaling_is_monotone(units in 0.5f64..6.0, time in 0u32..180, carbs in 0f64..80.0) {
        let p = params();
        let scenario = Scenario { meals: vec![Meal { time: 30.0, carbs }], ..Scenario::empty(240.0).with_initial_glucose(180.0) };
        let with = |u: f64| {
            let mut plan = basal_plan(&p, 240.0);
            plan.actions.push(PlanAction::bolus(time as f64, u));
            simulate(&p, &plan, &scenario, &SimConfig::default()).unwrap()
        };
        let (a, b) = (with(units), with(1.5 * units));
        for (x, y) in a.samples.iter().zip(&b.samples) {
            prop_assert!(y <= x);
        }
    }

    #[test]
    fn equilibrium_is_held_for_any_valid_profile(
        p1 in 0.005f64..0.05, p2 in 0.005f64..0.1, p3 in 1e-6f64..1e-4, n in 0.05f64..0.3, gb in 70f64..180.0,
    ) {
        let p = PatientParams { p1, p2, p3, n, gb, ..params() };
        let trace = simulate(&p, &basal_plan(&p, 600.0), &Scenario::empty(600.0), &SimConfig::default()).unwrap();
        for g in &trace.samples {
            prop_assert!((g - gb).abs() <= 1e-6);
        }
    }
}
