use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use aidtwin::llm::read_transcript;
use aidtwin::service::{router, AppState, LlmBackend, ServiceConfig};
use aidtwin::store::Store;
use aidtwin_core::plan::parse_plan;
use aidtwin_core::safety::evaluate_trace;
use aidtwin_core::{simulate, PatientParams, PlanQuality, Scenario, ScoreWeights, SimConfig, StlFormula, UsagePlan};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)).unwrap()
}

fn transcript(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/transcripts").join(name)
}

struct Harness {
    state: Arc<AppState>,
    app: Router,
}

impl Harness {
    fn with(store: Store, config: ServiceConfig) -> Self {
        let state = AppState::new(store, &config);
        let app = router(state.clone(), None);
        Self { state, app }
    }

    fn new() -> Self {
        Self::with(Store::in_memory(), ServiceConfig::default())
    }

    async fn call(&self, method: &str, uri: &str, body: Option<&Value>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
            .unwrap();
        self.raw(req).await
    }

    async fn raw(&self, req: Request<Body>) -> (StatusCode, Value) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    async fn nominal_twin(&self) -> String {
        let (status, body) = self.call("POST", "/twins", Some(&json!({ "params": {} }))).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["id"].as_str().unwrap().to_string()
    }

    async fn wait_for_job(&self, id: &str) -> Value {
        for _ in 0..600 {
            let (status, job) = self.call("GET", &format!("/jobs/{id}"), None).await;
            assert_eq!(status, StatusCode::OK);
            if job["status"] == "succeeded" || job["status"] == "failed" {
                return job;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        panic!("job {id} did not finish");
    }
}

fn assert_error_shape(body: &Value, code: &str) {
    assert_eq!(body["code"], code, "{body}");
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(body.as_object().unwrap().contains_key("details"));
}

#[tokio::test]
async fn unknown_twin_is_404() {
    let h = Harness::new();
    let (status, body) = h.call("GET", "/twins/unknown", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error_shape(&body, "twin-not-found");
}

#[tokio::test]
async fn malformed_requests_get_structured_errors() {
    let h = Harness::new();
    let req = Request::builder().method("POST").uri("/simulate").body(Body::from("{not json")).unwrap();
    let (status, body) = h.raw(req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error_shape(&body, "bad-request");
    let (status, body) = h.call("GET", "/no/such/route", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error_shape(&body, "not-found");
    let (status, body) = h.call("POST", "/twins", Some(&json!({ "params": { "p1": -1 } }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error_shape(&body, "params-invalid");
}

#[tokio::test]
async fn manual_twin_round_trip() {
    let h = Harness::new();
    let (status, created) = h.call("POST", "/twins", Some(&json!({ "name": "adult", "params": { "p1": 0.02 } }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["provenance"], "manual");
    let params: PatientParams = serde_json::from_value(created["params"].clone()).unwrap();
    assert_eq!(params, PatientParams { p1: 0.02, ..PatientParams::NOMINAL_ADULT });
    let id = created["id"].as_str().unwrap();
    let (status, fetched) = h.call("GET", &format!("/twins/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fetched, created);
    let (_, list) = h.call("GET", "/twins", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn twin_from_csv_is_fitted() {
    let h = Harness::new();
    let body = json!({
        "cgm_csv": fixture("cgm.csv"),
        "pump_csv": fixture("pump.csv"),
        "bounds": { "p1": [0.002, 0.08], "p2": [0.002, 0.1], "p3": [1e-6, 1e-4], "n": [0.03, 0.3] },
        "starts": 2
    });
    let (status, twin) = h.call("POST", "/twins", Some(&body)).await;
    assert_eq!(status, StatusCode::CREATED, "{twin}");
    assert_eq!(twin["provenance"], "fit");
    let p1 = twin["params"]["p1"].as_f64().unwrap();
    assert!((p1 - 0.02).abs() / 0.02 < 0.1, "p1 {p1}");
    assert!(twin["fit"]["rmse"].as_f64().unwrap() < 2.0);
}

#[tokio::test]
async fn equilibrium_simulation_stays_at_basal_glucose() {
    let h = Harness::new();
    let twin = h.nominal_twin().await;
    let req =
        json!({ "twin_id": twin, "plan": fixture("equilibrium.plan"), "scenario": fixture("equilibrium.scenario") });
    let (status, body) = h.call("POST", "/simulate", Some(&req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["metrics"]["tir"], 1.0);
    let samples = body["trace"]["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 289);
    // the fixture basal is the equilibrium rate rounded to five decimals
    assert!(samples.iter().all(|g| (g.as_f64().unwrap() - 120.0).abs() < 1e-3));
}

#[tokio::test]
async fn plan_errors_come_back_verbatim() {
    let h = Harness::new();
    let twin = h.nominal_twin().await;
    let plan = "segment 0 240 basal=-1 isf=50 cr=10 target=120\nmeal 30 carbs=abc\n";
    let req = json!({ "twin_id": twin, "plan": plan, "scenario": "horizon 240\n" });
    let (status, body) = h.call("POST", "/simulate", Some(&req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error_shape(&body, "plan-invalid");
    let expected = parse_plan(plan).unwrap_err();
    assert_eq!(body["details"]["violations"], serde_json::to_value(&expected.0).unwrap());
    assert_eq!(body["message"], expected.to_string());
}

#[tokio::test]
async fn evaluate_matches_the_library() {
    let h = Harness::new();
    let twin = h.nominal_twin().await;
    let (plan, scenario, spec) =
        (fixture("exercise-hypo.plan"), fixture("exercise-hypo.scenario"), fixture("always-ge-70-4h.spec"));
    let req = json!({ "twin_id": twin, "plan": plan, "scenario": scenario, "spec": spec });
    let (status, body) = h.call("POST", "/evaluate", Some(&req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let quality: PlanQuality = serde_json::from_value(body["quality"].clone()).unwrap();
    assert!(quality.robustness < 0.0 && quality.score < 0.0);
    assert_eq!(body["safe"], false);

    let trace = simulate(
        &PatientParams::NOMINAL_ADULT,
        &UsagePlan::parse(&plan).unwrap(),
        &Scenario::parse(&scenario).unwrap(),
        &SimConfig::default(),
    )
    .unwrap();
    let direct =
        evaluate_trace(&trace, &StlFormula::parse("always 0 240 (ge 70)").unwrap(), &ScoreWeights::default()).unwrap();
    assert_eq!(quality, direct);
    assert_eq!(body["trace"], serde_json::to_value(&trace).unwrap());
}

#[tokio::test]
async fn decisions_are_append_only() {
    let h = Harness::new();
    let twin = h.nominal_twin().await;
    let req = json!({ "twin_id": twin, "plan": fixture("exercise-hypo.plan"), "verdict": "rejected", "note": "needs a snack" });
    let (s1, a) = h.call("POST", "/decisions", Some(&req)).await;
    let (s2, b) = h.call("POST", "/decisions", Some(&req)).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_ne!(a["id"], b["id"]);
    let a_id = a["id"].as_str().unwrap();
    for method in ["PUT", "PATCH", "DELETE"] {
        let (status, body) =
            h.call(method, &format!("/decisions/{a_id}"), Some(&json!({ "verdict": "approved" }))).await;
        assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED, "{method}");
        assert_error_shape(&body, "method-not-allowed");
    }
    let (_, fetched) = h.call("GET", &format!("/decisions/{a_id}"), None).await;
    assert_eq!(fetched, a);
    let (_, list) = h.call("GET", &format!("/decisions?twin_id={twin}"), None).await;
    assert_eq!(list.as_array().unwrap().len(), 2);

    let no_note = json!({ "twin_id": twin, "plan": fixture("exercise-hypo.plan"), "verdict": "approved", "note": " " });
    let (status, body) = h.call("POST", "/decisions", Some(&no_note)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error_shape(&body, "note-required");
    let bad_verdict =
        json!({ "twin_id": twin, "plan": fixture("exercise-hypo.plan"), "verdict": "maybe", "note": "x" });
    assert_eq!(h.call("POST", "/decisions", Some(&bad_verdict)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn local_refinement_job() {
    let h = Harness::new();
    let twin = h.nominal_twin().await;
    let req =
        json!({ "twin_id": twin, "context": fixture("run.context"), "planner": "local", "budget": 500, "seed": 7 });
    let (status, accepted) = h.call("POST", "/refine", Some(&req)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{accepted}");
    let job = h.wait_for_job(accepted["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "succeeded", "{job}");
    let result = &job["result"];
    assert_eq!(result["stop_reason"], "safe");
    assert_eq!(result["safe"], true);
    assert!(result["verified_robustness"].as_f64().unwrap() >= 0.0);
    assert!(parse_plan(result["best_plan"].as_str().unwrap()).is_ok());
}

#[tokio::test(flavor = "multi_thread")]
async fn llm_refinement_job_from_a_transcript() {
    let exchanges = read_transcript(&transcript("irrelevant-then-safe.jsonl")).unwrap();
    let config = ServiceConfig { llm: LlmBackend::Replay(exchanges), ..ServiceConfig::default() };
    let h = Harness::with(Store::in_memory(), config);
    let twin = h.nominal_twin().await;
    let req = json!({ "twin_id": twin, "context": fixture("run.context"), "planner": "llm", "budget": 5 });
    let (_, accepted) = h.call("POST", "/refine", Some(&req)).await;
    let job = h.wait_for_job(accepted["job_id"].as_str().unwrap()).await;
    assert_eq!(job["result"]["hallucinations"], json!({ "queries": 2, "irrelevant": 1 }));
    assert_eq!(job["result"]["stop_reason"], "safe");
}

/// Reads a whole event stream into (event, data) pairs.
async fn events(h: &Harness, job: &str) -> Vec<(String, Value)> {
    let req = Request::builder().uri(format!("/jobs/{job}/events")).body(Body::empty()).unwrap();
    let resp = h.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    text.split("\n\n")
        .filter_map(|block| {
            let field = |name: &str| block.lines().find_map(|l| l.strip_prefix(name)).map(str::to_string);
            Some((field("event: ")?, serde_json::from_str(&field("data: ")?).unwrap()))
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn job_events_stream_each_iteration_then_the_record() {
    let h = Harness::new();
    let twin = h.nominal_twin().await;
    let req =
        json!({ "twin_id": twin, "context": fixture("run.context"), "planner": "local", "budget": 500, "seed": 7 });
    let (_, accepted) = h.call("POST", "/refine", Some(&req)).await;
    let id = accepted["job_id"].as_str().unwrap();
    let stream = events(&h, id).await;
    let (last, iterations) = stream.split_last().unwrap();
    assert_eq!(last.0, "done");
    assert_eq!(last.1["status"], "succeeded");
    let logged = last.1["result"]["log"]["iterations"].as_array().unwrap();
    assert!(iterations.iter().all(|(e, _)| e == "iteration"));
    assert_eq!(iterations.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(), *logged);
    // a finished job replays the same stream
    assert_eq!(events(&h, id).await, stream);
    let (status, body) = h.call("GET", "/jobs/job-999999/events", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error_shape(&body, "job-not-found");
}

#[tokio::test(flavor = "multi_thread")]
async fn failed_job_streams_its_partial_log() {
    let mut exchanges = read_transcript(&transcript("unsafe-then-safe.jsonl")).unwrap();
    exchanges.truncate(1);
    let config = ServiceConfig { llm: LlmBackend::Replay(exchanges), ..ServiceConfig::default() };
    let h = Harness::with(Store::in_memory(), config);
    let twin = h.nominal_twin().await;
    let req = json!({ "twin_id": twin, "context": fixture("run.context"), "planner": "llm", "budget": 5 });
    let (_, accepted) = h.call("POST", "/refine", Some(&req)).await;
    let stream = events(&h, accepted["job_id"].as_str().unwrap()).await;
    let kinds: Vec<&str> = stream.iter().map(|(e, _)| e.as_str()).collect();
    assert_eq!(kinds, ["iteration", "done"]);
    assert_eq!(stream[1].1["status"], "failed");
    assert_eq!(stream[1].1["error"]["code"], "planner-failure");
    assert!(stream[0].1["quality"]["robustness"].as_f64().unwrap() < 0.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn running_job_reports_progress() {
    // chat endpoint: an unsafe plan at once, then the safe one only when released
    let release = Arc::new(tokio::sync::Notify::new());
    let gate = release.clone();
    let hits = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let chat = Router::new().route(
        "/v1/chat/completions",
        axum::routing::post(move || {
            let (gate, hits) = (gate.clone(), hits.clone());
            async move {
                let plan = if hits.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 0 {
                    "segment 0 240 basal=1 isf=50 cr=10 target=120"
                } else {
                    gate.notified().await;
                    "segment 0 240 basal=1 isf=50 cr=10 target=120\nmeal 0 carbs=25"
                };
                let content = format!("```plan\n{plan}\n```");
                json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, chat).await.unwrap() });

    let llm = aidtwin::llm::LlmConfig { base_url: format!("http://{addr}/v1"), ..Default::default() };
    let h = Harness::with(Store::in_memory(), ServiceConfig { llm: LlmBackend::Http(llm), ..ServiceConfig::default() });
    let twin = h.nominal_twin().await;
    let req = json!({ "twin_id": twin, "context": fixture("run.context"), "planner": "llm", "budget": 5 });
    let (_, accepted) = h.call("POST", "/refine", Some(&req)).await;
    let id = accepted["job_id"].as_str().unwrap();
    let mut running = Value::Null;
    for _ in 0..200 {
        let (_, job) = h.call("GET", &format!("/jobs/{id}"), None).await;
        if job["progress"]["iterations"].as_array().is_some_and(|its| its.len() == 1) {
            running = job;
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(running["status"], "running", "{running}");
    assert!(running["progress"]["iterations"][0]["quality"]["robustness"].as_f64().unwrap() < 0.0);
    release.notify_one();
    let done = h.wait_for_job(id).await;
    assert_eq!(done["result"]["stop_reason"], "safe");
    assert_eq!(done["result"]["log"]["iterations"][0], running["progress"]["iterations"][0]);
    assert!(done.get("progress").is_none());
}

#[tokio::test]
async fn refine_requests_are_validated_before_queueing() {
    let h = Harness::new();
    let twin = h.nominal_twin().await;
    let llm = json!({ "twin_id": twin, "context": fixture("run.context"), "planner": "llm", "budget": 5 });
    let (status, body) = h.call("POST", "/refine", Some(&llm)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error_shape(&body, "llm-unavailable");
    let zero = json!({ "twin_id": twin, "context": fixture("run.context"), "planner": "local", "budget": 0 });
    assert_eq!(h.call("POST", "/refine", Some(&zero)).await.1["code"], "budget-invalid");
    let bad = json!({ "twin_id": twin, "context": "glucose abc\n", "planner": "local", "budget": 5 });
    assert_eq!(h.call("POST", "/refine", Some(&bad)).await.1["code"], "context-invalid");
    let (_, jobs) = h.call("GET", "/jobs", None).await;
    assert_eq!(jobs, json!([]));
}

#[tokio::test(flavor = "multi_thread")]
async fn reads_never_change_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let h = Harness::with(Store::open(&path).unwrap(), ServiceConfig::default());
    let twin = h.nominal_twin().await;
    let decision =
        json!({ "twin_id": twin, "plan": fixture("exercise-hypo.plan"), "verdict": "approved", "note": "ok" });
    let (_, d) = h.call("POST", "/decisions", Some(&decision)).await;
    let refine =
        json!({ "twin_id": twin, "context": fixture("run.context"), "planner": "local", "budget": 20, "seed": 1 });
    let (_, job) = h.call("POST", "/refine", Some(&refine)).await;
    let job_id = job["job_id"].as_str().unwrap().to_string();
    h.wait_for_job(&job_id).await;

    let before = h.state.store().snapshot();
    let bytes_before = std::fs::read(&path).unwrap();
    let d_id = d["id"].as_str().unwrap();
    for uri in [
        "/twins".to_string(),
        format!("/twins/{twin}"),
        "/twins/missing".into(),
        "/jobs".into(),
        format!("/jobs/{job_id}"),
        "/jobs/missing".into(),
        "/decisions".into(),
        format!("/decisions/{d_id}"),
        format!("/decisions?twin_id={twin}"),
        "/health".into(),
    ] {
        h.call("GET", &uri, None).await;
    }
    assert_eq!(h.state.store().snapshot(), before);
    assert_eq!(std::fs::read(&path).unwrap(), bytes_before);

    // and everything survives a restart
    let reopened = Store::open(&path).unwrap();
    assert_eq!(reopened.snapshot(), before);
}
