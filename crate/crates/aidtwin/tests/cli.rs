use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aidtwin_core::PlanQuality;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn aidtwin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aidtwin")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn evaluate(plan: &str, scenario: &str, spec: &str) -> Output {
    aidtwin(&[
        "evaluate",
        "--twin",
        path(&fixture("nominal.twin.json")),
        "--plan",
        path(&fixture(plan)),
        "--scenario",
        path(&fixture(scenario)),
        "--spec",
        path(&fixture(spec)),
    ])
}

/// The single stderr line of a failed command, parsed.
fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

#[test]
fn evaluate_gates_on_robustness() {
    let out = evaluate("equilibrium.plan", "equilibrium.scenario", "always-ge-70-24h.spec");
    assert_eq!(out.status.code(), Some(0));
    let q: PlanQuality = serde_json::from_slice(&out.stdout).unwrap();
    assert!((q.robustness - 50.0).abs() < 1e-3, "{}", q.robustness);
    assert_eq!(q.tir, 1.0);

    let out = evaluate("exercise-hypo.plan", "exercise-hypo.scenario", "always-ge-70-4h.spec");
    assert_eq!(out.status.code(), Some(1));
    let q: PlanQuality = serde_json::from_slice(&out.stdout).unwrap();
    assert!(q.robustness < 0.0 && q.score < 0.0);
}

#[test]
fn failures_exit_2_with_one_json_line() {
    let out = aidtwin(&["evaluate", "--twin", "missing.json", "--plan", "x", "--scenario", "y", "--spec", "z"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "io-error");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.plan");
    std::fs::write(&bad, "segment 0 240 basal=1 isf=0 cr=10 target=120\n").unwrap();
    let out = aidtwin(&[
        "simulate",
        "--twin",
        path(&fixture("nominal.twin.json")),
        "--plan",
        path(&bad),
        "--scenario",
        path(&fixture("exercise-hypo.scenario")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "plan-invalid");
    assert!(err["message"].as_str().unwrap().contains("line 1"));

    // horizon longer than the trace
    let out = evaluate("exercise-hypo.plan", "exercise-hypo.scenario", "always-ge-70-24h.spec");
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "evaluation-failed");
}

fn refine(dir: &Path, tag: &str, extra: &[&str]) -> (Output, Vec<u8>, Vec<u8>) {
    let plan = dir.join(format!("{tag}.plan"));
    let log = dir.join(format!("{tag}.json"));
    let (twin, context) = (fixture("nominal.twin.json"), fixture("run.context"));
    let mut args =
        vec!["refine", "--twin", path(&twin), "--context", path(&context), "-o", path(&plan), "--log", path(&log)];
    args.extend_from_slice(extra);
    let out = aidtwin(&args);
    let read = |p: &Path| std::fs::read(p).unwrap_or_default();
    (out, read(&plan), read(&log))
}

#[test]
fn seeded_refinement_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--planner", "local", "--budget", "500", "--seed", "7"];
    let (a, plan_a, log_a) = refine(dir.path(), "a", &args);
    let (b, plan_b, log_b) = refine(dir.path(), "b", &args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(0));
    assert_eq!(plan_a, plan_b);
    assert_eq!(log_a, log_b);
    let log: Value = serde_json::from_slice(&log_a).unwrap();
    assert_eq!(log["stop_reason"], "safe");
    assert!(log["log"]["iterations"].as_array().unwrap().len() <= 500);
    assert_eq!(String::from_utf8(plan_a).unwrap(), log["best_plan"].as_str().unwrap());
}

#[test]
fn llm_refinement_replays_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let t = fixture("transcripts/irrelevant-then-safe.jsonl");
    let (out, plan, log) = refine(dir.path(), "safe", &["--planner", "llm", "--budget", "5", "--transcript", path(&t)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!plan.is_empty());
    let log: Value = serde_json::from_slice(&log).unwrap();
    assert_eq!(log["hallucinations"]["irrelevant"], 1);

    let t = fixture("transcripts/prose-only.jsonl");
    let out = aidtwin(&[
        "refine",
        "--twin",
        path(&fixture("nominal.twin.json")),
        "--context",
        path(&fixture("run.context")),
        "--planner",
        "llm",
        "--budget",
        "3",
        "--transcript",
        path(&t),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let result: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["stop_reason"], "budget");
    assert_eq!(result["hallucinations"]["irrelevant"], 3);
    assert_eq!(result["best_plan"], Value::Null);
}

#[test]
fn simulate_report_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let out = aidtwin(&[
        "simulate",
        "--twin",
        path(&fixture("nominal.twin.json")),
        "--plan",
        path(&fixture("exercise-hypo.plan")),
        "--scenario",
        path(&fixture("exercise-hypo.scenario")),
        "-o",
        path(&trace),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("t_min,glucose_mgdl,insulin_U\n0,85,"));
    assert_eq!(csv.lines().count(), 1 + 49);

    let svg = dir.path().join("trace.svg");
    assert_eq!(aidtwin(&["report", "--trace", path(&trace), "-o", path(&svg)]).status.code(), Some(0));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("target-band"));

    let twin = dir.path().join("twin.json");
    let out = aidtwin(&[
        "fit",
        "--cgm",
        path(&fixture("cgm.csv")),
        "--pump",
        path(&fixture("pump.csv")),
        "--bounds",
        path(&fixture("default.bounds")),
        "--starts",
        "2",
        "-o",
        path(&twin),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&twin).unwrap()).unwrap();
    assert_eq!(report["record_start"], "2024-03-04T06:00:00Z");
    assert!(report["rmse"].as_f64().unwrap() < 2.0);
    assert!(report["identifiability"]["params"].as_array().unwrap().len() == 4);
    // the fit report is itself a twin file
    let out = aidtwin(&[
        "evaluate",
        "--twin",
        path(&twin),
        "--plan",
        path(&fixture("exercise-hypo.plan")),
        "--scenario",
        path(&fixture("exercise-hypo.scenario")),
        "--spec",
        path(&fixture("always-ge-70-4h.spec")),
    ]);
    assert!(matches!(out.status.code(), Some(0 | 1)));
}
