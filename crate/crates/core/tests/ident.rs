use std::time::{Duration, Instant};

use aidtwin_core::ident::{objective_gradient, rmse, IdentError, TimedValue};
use aidtwin_core::{fit, identifiability, Bounds, FitConfig, GlucoseTrace, ParamId, PatientParams, UsageRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const FREE: [ParamId; 4] = [ParamId::P1, ParamId::P2, ParamId::P3, ParamId::N];

fn truth() -> PatientParams {
    PatientParams { p1: 0.02, p2: 0.025, p3: 1.3e-5, n: 0.11, ..PatientParams::NOMINAL_ADULT }
}

/// Twelve hours of ordinary use: three meals with boluses and two basal changes.
fn day_record(p: &PatientParams) -> UsageRecord {
    let tv = TimedValue::new;
    UsageRecord::simulated(
        p,
        140.0,
        720.0,
        5.0,
        vec![tv(0.0, 1.0), tv(200.0, 0.8), tv(420.0, 1.2)],
        vec![tv(60.0, 4.0), tv(300.0, 6.0), tv(540.0, 3.0)],
        vec![tv(60.0, 50.0), tv(300.0, 70.0), tv(540.0, 40.0)],
    )
    .unwrap()
}

fn with_noise(record: &UsageRecord, sigma: f64, seed: u64) -> UsageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let samples = record.cgm.samples.iter().map(|g| g + normal.sample(&mut rng)).collect();
    UsageRecord { cgm: GlucoseTrace::new(record.cgm.t0, record.cgm.dt, samples).unwrap(), ..record.clone() }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn noiseless_round_trip() {
    let truth = truth();
    let record = day_record(&truth);
    let started = Instant::now();
    let fit = fit(&record, &PatientParams::NOMINAL_ADULT, &Bounds::defaults_for(&FREE), &FitConfig::default()).unwrap();
    assert!(started.elapsed() < Duration::from_secs(60));
    for id in FREE {
        let e = rel_err(id.get(&fit.params), id.get(&truth));
        assert!(e < 0.01, "{}: fitted {} true {} ({:.3}%)", id.name(), id.get(&fit.params), id.get(&truth), 100.0 * e);
    }
    assert!(fit.rmse < 1e-3, "rmse {}", fit.rmse);
    assert!(fit.rmse <= fit.initial_rmse);
}

#[test]
fn noisy_round_trip_recovers_p1() {
    let truth = truth();
    let record = with_noise(&day_record(&truth), 2.0, 11);
    let fit = fit(&record, &PatientParams::NOMINAL_ADULT, &Bounds::defaults_for(&FREE), &FitConfig::default()).unwrap();
    assert!(rel_err(fit.params.p1, truth.p1) < 0.10, "p1 {}", fit.params.p1);
    // the residual is the sensor noise, not model error
    assert!((1.5..2.5).contains(&fit.rmse), "rmse {}", fit.rmse);
}

#[test]
fn estimates_stay_in_their_boxes() {
    let record = day_record(&truth());
    let mut bounds = Bounds::defaults_for(&FREE);
    // the true p1 (0.02) lies above this box
    bounds.set(ParamId::P1, 0.005, 0.016);
    let fit =
        fit(&record, &PatientParams::NOMINAL_ADULT, &bounds, &FitConfig { starts: 2, ..FitConfig::default() }).unwrap();
    for &(id, lo, hi) in &bounds.entries {
        let v = id.get(&fit.params);
        assert!((lo..=hi).contains(&v), "{} = {v} outside [{lo}, {hi}]", id.name());
    }
    assert!(fit.rmse < fit.initial_rmse);
}

#[test]
fn fitting_is_deterministic() {
    let record = with_noise(&day_record(&truth()), 2.0, 3);
    let config = FitConfig { starts: 3, seed: 5, ..FitConfig::default() };
    let a = fit(&record, &PatientParams::NOMINAL_ADULT, &Bounds::defaults_for(&FREE), &config).unwrap();
    let b = fit(&record, &PatientParams::NOMINAL_ADULT, &Bounds::defaults_for(&FREE), &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradient_is_consistent_across_steps() {
    let record = day_record(&truth());
    let at = PatientParams::NOMINAL_ADULT;
    let coarse = objective_gradient(&record, &at, &FREE, 1e-4).unwrap();
    let fine = objective_gradient(&record, &at, &FREE, 1e-6).unwrap();
    for ((id, a), b) in FREE.iter().zip(&coarse).zip(&fine) {
        assert!(rel_err(*a, *b) < 1e-3, "{}: {a} vs {b}", id.name());
    }
    // stepping against the gradient lowers the error
    let mut moved = at;
    for (id, g) in FREE.iter().zip(&coarse) {
        let v = id.get(&at);
        id.set(&mut moved, v - 1e-3 * v * g.signum());
    }
    assert!(rmse(&record, &moved).unwrap() < rmse(&record, &at).unwrap());
}

#[test]
fn exercise_gain_is_unidentifiable_without_exercise() {
    let record = day_record(&truth());
    let report = identifiability(&truth(), &record, &ParamId::DEFAULT_FREE).unwrap();
    let alpha = report.get(ParamId::AlphaEx).unwrap();
    assert_eq!(alpha.sensitivity, 0.0);
    assert!(alpha.unidentifiable);
    assert_eq!(report.flagged(), [ParamId::AlphaEx]);
    for id in FREE {
        assert!(report.get(id).unwrap().sensitivity > 1.0, "{}", id.name());
    }
    // a zero column makes the Gram matrix singular
    assert_eq!(report.condition_number, None);
    let informative = identifiability(&truth(), &record, &FREE).unwrap();
    assert!(informative.condition().is_finite());
}

#[test]
fn flat_record_cannot_see_insulin_action() {
    let p = PatientParams::NOMINAL_ADULT;
    let flat =
        UsageRecord::simulated(&p, p.gb, 720.0, 5.0, vec![TimedValue::new(0.0, p.equilibrium_basal())], vec![], vec![])
            .unwrap();
    assert!(flat.cgm.samples.iter().all(|g| (g - p.gb).abs() < 1e-6));
    let report = identifiability(&p, &flat, &[ParamId::P1, ParamId::P2, ParamId::P3]).unwrap();
    // with plasma insulin pinned at Ib the remote action never moves
    assert_eq!(report.get(ParamId::P2).unwrap().sensitivity, 0.0);
    assert_eq!(report.get(ParamId::P3).unwrap().sensitivity, 0.0);
    // and with glucose at Gb neither does glucose effectiveness matter
    assert!(report.get(ParamId::P1).unwrap().sensitivity < 1e-6);
}

#[test]
fn duplicated_parameter_is_ill_conditioned() {
    let record = day_record(&truth());
    let report = identifiability(&truth(), &record, &[ParamId::P1, ParamId::P1]).unwrap();
    assert!(report.condition() > 1e8, "{}", report.condition());
}

#[test]
fn short_records_are_rejected() {
    let p = PatientParams::NOMINAL_ADULT;
    let short = UsageRecord::simulated(&p, 120.0, 240.0, 5.0, vec![TimedValue::new(0.0, 1.0)], vec![], vec![]).unwrap();
    let err = fit(&short, &p, &Bounds::defaults_for(&FREE), &FitConfig::default()).unwrap_err();
    assert_eq!(err, IdentError::RecordTooShort { span: 240.0, min: 360.0 });
}

#[test]
fn unsorted_logs_are_rejected() {
    let mut record = day_record(&truth());
    record.bolus_log.swap(0, 2);
    let err =
        fit(&record, &PatientParams::NOMINAL_ADULT, &Bounds::defaults_for(&FREE), &FitConfig::default()).unwrap_err();
    assert!(matches!(err, IdentError::InvalidRecord(ref m) if m.contains("bolus")), "{err}");
}
