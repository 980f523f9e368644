//! HTTP JSON API over twins, simulation, evaluation, refinement jobs and review
//! decisions.
//!
//! Every error response is `{"code", "message", "details"}`. Request bodies are
//! decoded by hand so malformed JSON also gets that shape.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use aidtwin_core::ident::{FitConfig, ParamId};
use aidtwin_core::planner::{Iteration, PlannerError};
use aidtwin_core::safety::{evaluate_trace, glycemic_metrics, GlycemicMetrics, TARGET_BAND};
use aidtwin_core::{
    fit, simulate, Bounds, GlucoseTrace, PatientParams, PlanContext, PlanQuality, Scenario, ScoreWeights, SimConfig,
    UsagePlan, UsageRecord, Violations,
};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::files::{params_from_json, parse_spec};
use crate::ingest::{self, IngestConfig};
use crate::llm::{Exchange, HttpChatModel, LlmConfig, ReplayChatModel};
use crate::refine::{refine_llm_observed, refine_local_observed, PlannerKind, RefineOutput};
use crate::store::{DecisionRecord, JobError, JobRecord, JobStatus, Store, TwinRecord, Verdict};

pub const DEFAULT_WORKERS: usize = 2;
/// Upper limit on a refinement budget accepted over the API.
pub const MAX_BUDGET: usize = 5000;
/// How often an event stream checks a running job for new iterations.
const EVENT_POLL: Duration = Duration::from_millis(50);

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), details: Value::Null }
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message)
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn violations(code: &'static str, v: &Violations) -> Self {
        Self::unprocessable(code, v.to_string()).with_details(json!({ "violations": v.0 }))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "details": self.details });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Where `planner: llm` refinement jobs get their replies.
#[derive(Debug, Clone, Default)]
pub enum LlmBackend {
    #[default]
    Disabled,
    Http(LlmConfig),
    /// Every job replays the same transcript from its first exchange.
    Replay(Vec<Exchange>),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workers: usize,
    pub llm: LlmBackend,
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { workers: DEFAULT_WORKERS, llm: LlmBackend::Disabled, ui_dir: None }
    }
}

pub struct AppState {
    store: Mutex<Store>,
    workers: Arc<Semaphore>,
    llm: LlmBackend,
    /// Iterations logged so far by running jobs; not persisted.
    progress: Mutex<HashMap<String, Vec<Iteration>>>,
}

impl AppState {
    pub fn new(store: Store, config: &ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            store: Mutex::new(store),
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            llm: config.llm.clone(),
            progress: Mutex::new(HashMap::new()),
        })
    }

    fn progress(&self) -> MutexGuard<'_, HashMap<String, Vec<Iteration>>> {
        self.progress.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// A job with the iterations logged so far, from the live progress while it
    /// runs and from the stored result once it has finished.
    fn job_snapshot(&self, id: &str) -> Option<(JobRecord, Vec<Value>)> {
        // the store lock is held while reading progress: a job is marked finished
        // before its progress entry goes away
        let store = self.store();
        let job = store.job(id)?.clone();
        let iterations = match (&job.result, &job.error) {
            (Some(result), _) => result.log.iterations.iter().map(to_value).collect(),
            (None, Some(error)) => error.details["log"]["iterations"].as_array().cloned().unwrap_or_default(),
            (None, None) => self.progress().get(id).map(|its| its.iter().map(to_value).collect()).unwrap_or_default(),
        };
        Some((job, iterations))
    }

    /// The store, for inspection; handlers hold the lock only briefly.
    pub fn store(&self) -> MutexGuard<'_, Store> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn twin_params(&self, id: &str) -> ApiResult<PatientParams> {
        self.store().twin(id).map(|t| t.params).ok_or_else(|| twin_not_found(id))
    }
}

fn twin_not_found(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "twin-not-found", format!("no twin with id `{id}`"))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn decode<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let mut app = Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/twins", post(create_twin).get(list_twins))
        .route("/twins/{id}", get(get_twin))
        .route("/simulate", post(simulate_plan))
        .route("/evaluate", post(evaluate_plan))
        .route("/refine", post(start_refine))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/events", get(job_events))
        .route("/decisions", post(create_decision).get(list_decisions))
        .route("/decisions/{id}", get(get_decision))
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method-not-allowed", "method not allowed on this route")
        })
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such route") })
        .with_state(state);
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app
}

pub async fn serve(addr: SocketAddr, store_path: &Path, config: ServiceConfig) -> Result<(), String> {
    let store = Store::open(store_path).map_err(|e| e.to_string())?;
    let state = AppState::new(store, &config);
    let app = router(state, config.ui_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| format!("binding {addr}: {e}"))?;
    let local = listener.local_addr().map_err(|e| e.to_string())?;
    eprintln!("aidtwin service listening on http://{local}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}

// ---- twins ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateTwin {
    #[serde(default)]
    name: Option<String>,
    /// Explicit parameters; omitted ones take nominal values.
    #[serde(default)]
    params: Option<Value>,
    #[serde(default)]
    record: Option<UsageRecord>,
    #[serde(default)]
    cgm_csv: Option<String>,
    #[serde(default)]
    pump_csv: Option<String>,
    /// Starting point of the fit; nominal adult when absent.
    #[serde(default)]
    init: Option<Value>,
    /// `{name: [lo, hi]}` for each free parameter.
    #[serde(default)]
    bounds: Option<BTreeMap<String, (f64, f64)>>,
    #[serde(default)]
    starts: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

fn fit_bounds(spec: Option<BTreeMap<String, (f64, f64)>>) -> ApiResult<Bounds> {
    let Some(spec) = spec else {
        return Ok(Bounds::defaults_for(&ParamId::DEFAULT_FREE));
    };
    let mut bounds = Bounds { entries: Vec::new() };
    for (name, (lo, hi)) in spec {
        let id = ParamId::from_name(&name)
            .ok_or_else(|| ApiError::bad_request(format!("unknown parameter `{name}` in bounds")))?;
        bounds.entries.push((id, lo, hi));
    }
    Ok(bounds)
}

async fn create_twin(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateTwin = decode(&body)?;
    let record = match (req.record, req.cgm_csv, req.pump_csv) {
        (Some(r), None, None) => Some(r),
        (None, Some(cgm), Some(pump)) => {
            let series = ingest::parse_cgm(cgm.as_bytes(), &IngestConfig::default())
                .map_err(|e| ApiError::unprocessable("ingest-failed", format!("cgm: {e}")))?;
            let log = ingest::parse_pump(pump.as_bytes())
                .map_err(|e| ApiError::unprocessable("ingest-failed", format!("pump: {e}")))?;
            Some(ingest::usage_record(&series, &log))
        }
        (None, None, None) => None,
        _ => return Err(ApiError::bad_request("give either `record` or both `cgm_csv` and `pump_csv`")),
    };
    let (params, provenance, fit_report) = match (req.params, record) {
        (Some(p), None) => {
            let params = params_from_json(&p).map_err(|m| ApiError::unprocessable("params-invalid", m))?;
            (params, "manual", None)
        }
        (None, Some(record)) => {
            let init = match req.init {
                Some(v) => params_from_json(&v).map_err(|m| ApiError::unprocessable("params-invalid", m))?,
                None => PatientParams::NOMINAL_ADULT,
            };
            let bounds = fit_bounds(req.bounds)?;
            let defaults = FitConfig::default();
            let config = FitConfig {
                starts: req.starts.unwrap_or(defaults.starts),
                seed: req.seed.unwrap_or(defaults.seed),
                ..defaults
            };
            let result = tokio::task::spawn_blocking(move || fit(&record, &init, &bounds, &config))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))?
                .map_err(|e| ApiError::unprocessable("fit-failed", e.to_string()))?;
            (result.params, "fit", Some(result))
        }
        (None, None) => return Err(ApiError::bad_request("give `params` or a usage record")),
        (Some(_), Some(_)) => return Err(ApiError::bad_request("`params` and a usage record are mutually exclusive")),
    };
    let mut store = state.store();
    let twin = TwinRecord {
        id: store.new_id("twin"),
        name: req.name,
        params,
        provenance: provenance.into(),
        fit: fit_report,
        created_at: now(),
    };
    store.insert_twin(twin.clone()).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(created(&format!("/twins/{}", twin.id), &twin))
}

fn created<T: Serialize>(location: &str, body: &T) -> Response {
    (StatusCode::CREATED, [(header::LOCATION, location.to_string())], Json(body)).into_response()
}

async fn list_twins(State(state): State<Arc<AppState>>) -> Json<Vec<TwinRecord>> {
    Json(state.store().twins().cloned().collect())
}

async fn get_twin(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<TwinRecord>> {
    state.store().twin(&id).cloned().map(Json).ok_or_else(|| twin_not_found(&id))
}

// ---- simulate / evaluate ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateRequest {
    twin_id: String,
    plan: String,
    scenario: String,
    /// Safety formula text; `always 0 H (ge 70)` over the scenario horizon when absent.
    #[serde(default)]
    spec: Option<String>,
    #[serde(default)]
    dt: Option<f64>,
    #[serde(default)]
    sample_interval: Option<f64>,
}

struct Prepared {
    params: PatientParams,
    plan: UsagePlan,
    scenario: Scenario,
    sim: SimConfig,
}

fn prepare(state: &AppState, req: &SimulateRequest) -> ApiResult<Prepared> {
    let params = state.twin_params(&req.twin_id)?;
    let plan = UsagePlan::parse(&req.plan).map_err(|v| ApiError::violations("plan-invalid", &v))?;
    let scenario = Scenario::parse(&req.scenario).map_err(|v| ApiError::violations("scenario-invalid", &v))?;
    let defaults = SimConfig::default();
    let sim = SimConfig {
        dt: req.dt.unwrap_or(defaults.dt),
        sample_interval: req.sample_interval.unwrap_or(defaults.sample_interval),
        ..defaults
    };
    Ok(Prepared { params, plan, scenario, sim })
}

fn run_simulation(p: &Prepared) -> ApiResult<GlucoseTrace> {
    simulate(&p.params, &p.plan, &p.scenario, &p.sim)
        .map_err(|e| ApiError::unprocessable("simulation-failed", e.to_string()))
}

#[derive(Serialize)]
struct SimulateResponse {
    trace: GlucoseTrace,
    metrics: GlycemicMetrics,
    lint: Vec<String>,
}

async fn simulate_plan(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SimulateResponse>> {
    let req: SimulateRequest = decode(&body)?;
    let p = prepare(&state, &req)?;
    let trace = run_simulation(&p)?;
    let metrics = glycemic_metrics(&trace, TARGET_BAND.0, TARGET_BAND.1)
        .map_err(|e| ApiError::unprocessable("evaluation-failed", e.to_string()))?;
    Ok(Json(SimulateResponse { trace, metrics, lint: p.plan.lint() }))
}

#[derive(Serialize)]
struct EvaluateResponse {
    quality: PlanQuality,
    safe: bool,
    spec: String,
    trace: GlucoseTrace,
    lint: Vec<String>,
}

async fn evaluate_plan(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<EvaluateResponse>> {
    let req: SimulateRequest = decode(&body)?;
    let p = prepare(&state, &req)?;
    let spec = match &req.spec {
        Some(text) => parse_spec(text).map_err(|m| ApiError::unprocessable("spec-invalid", m))?,
        None => PlanContext::default_spec(p.scenario.horizon),
    };
    let trace = run_simulation(&p)?;
    let quality = evaluate_trace(&trace, &spec, &ScoreWeights::default())
        .map_err(|e| ApiError::unprocessable("evaluation-failed", e.to_string()))?;
    Ok(Json(EvaluateResponse { safe: quality.is_safe(), quality, spec: spec.to_string(), trace, lint: p.plan.lint() }))
}

// ---- refinement jobs ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineRequest {
    twin_id: String,
    context: String,
    planner: PlannerKind,
    budget: usize,
    #[serde(default)]
    seed: u64,
}

async fn start_refine(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: RefineRequest = decode(&body)?;
    let params = state.twin_params(&req.twin_id)?;
    let ctx = PlanContext::parse(&req.context, params).map_err(|v| ApiError::violations("context-invalid", &v))?;
    if !(1..=MAX_BUDGET).contains(&req.budget) {
        return Err(ApiError::unprocessable(
            "budget-invalid",
            format!("budget must be in 1..={MAX_BUDGET}, got {}", req.budget),
        ));
    }
    if req.planner == PlannerKind::Llm && matches!(state.llm, LlmBackend::Disabled) {
        return Err(ApiError::unprocessable("llm-unavailable", "the service has no LLM endpoint configured"));
    }
    let job = {
        let mut store = state.store();
        let stamp = now();
        let job = JobRecord {
            id: store.new_id("job"),
            twin_id: req.twin_id,
            planner: req.planner,
            budget: req.budget,
            seed: req.seed,
            context: req.context,
            status: JobStatus::Queued,
            created_at: stamp.clone(),
            updated_at: stamp,
            result: None,
            error: None,
        };
        store.put_job(job.clone()).map_err(|e| ApiError::internal(e.to_string()))?;
        job
    };
    let body = json!({ "job_id": job.id, "status": job.status });
    let location = format!("/jobs/{}", job.id);
    tokio::spawn(run_job(state, job, ctx));
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, location)], Json(body)).into_response())
}

fn update_job(state: &AppState, job: &mut JobRecord, status: JobStatus) {
    job.status = status;
    job.updated_at = now();
    if let Err(e) = state.store().put_job(job.clone()) {
        eprintln!("job {}: could not persist status: {e}", job.id);
    }
}

async fn run_job(state: Arc<AppState>, mut job: JobRecord, ctx: PlanContext) {
    let Ok(_permit) = state.workers.clone().acquire_owned().await else {
        return;
    };
    state.progress().insert(job.id.clone(), Vec::new());
    update_job(&state, &mut job, JobStatus::Running);
    let (planner, budget, seed) = (job.planner, job.budget, job.seed);
    let (worker, id) = (state.clone(), job.id.clone());
    let outcome = tokio::task::spawn_blocking(move || {
        let mut observer = |it: &Iteration| {
            if let Some(its) = worker.progress().get_mut(&id) {
                its.push(it.clone());
            }
        };
        execute(&ctx, planner, budget, seed, &worker.llm, &mut observer)
    })
    .await;
    match outcome {
        Ok(Ok(result)) => {
            job.result = Some(result);
            update_job(&state, &mut job, JobStatus::Succeeded);
        }
        Ok(Err(error)) => {
            job.error = Some(error);
            update_job(&state, &mut job, JobStatus::Failed);
        }
        Err(panic) => {
            job.error = Some(JobError { code: "internal".into(), message: panic.to_string(), details: Value::Null });
            update_job(&state, &mut job, JobStatus::Failed);
        }
    }
    state.progress().remove(&job.id);
}

fn execute(
    ctx: &PlanContext,
    planner: PlannerKind,
    budget: usize,
    seed: u64,
    llm: &LlmBackend,
    observer: &mut dyn FnMut(&Iteration),
) -> Result<RefineOutput, JobError> {
    let result = match planner {
        PlannerKind::Local => refine_local_observed(ctx, budget, seed, observer),
        PlannerKind::Llm => match llm {
            LlmBackend::Http(config) => {
                refine_llm_observed(ctx, &mut HttpChatModel::new(config.clone()), budget, observer)
            }
            LlmBackend::Replay(exchanges) => {
                refine_llm_observed(ctx, &mut ReplayChatModel::new(exchanges.clone()), budget, observer)
            }
            LlmBackend::Disabled => {
                return Err(JobError {
                    code: "llm-unavailable".into(),
                    message: "no LLM endpoint configured".into(),
                    details: Value::Null,
                })
            }
        },
    };
    result.map_err(|e| match e {
        PlannerError::Failure { message, log, counter } => JobError {
            code: "planner-failure".into(),
            message,
            details: json!({ "log": log, "hallucinations": counter }),
        },
        PlannerError::InfeasibleContext(m) => {
            JobError { code: "infeasible-context".into(), message: m, details: Value::Null }
        }
        PlannerError::InvalidContext(m) => {
            JobError { code: "context-invalid".into(), message: m, details: Value::Null }
        }
    })
}

fn job_not_found(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "job-not-found", format!("no job with id `{id}`"))
}

fn to_value(it: &Iteration) -> Value {
    serde_json::to_value(it).unwrap_or(Value::Null)
}

/// The job record; while it runs, `progress` lists the iterations logged so far.
async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let (job, iterations) = state.job_snapshot(&id).ok_or_else(|| job_not_found(&id))?;
    let mut body = serde_json::to_value(&job).map_err(|e| ApiError::internal(e.to_string()))?;
    if job.status == JobStatus::Running {
        body["progress"] = json!({ "iterations": iterations });
    }
    Ok(Json(body))
}

/// Server-sent events for one job: an `iteration` event per logged iteration as it
/// completes, then a `done` event carrying the final job record.
async fn job_events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    if state.store().job(&id).is_none() {
        return Err(job_not_found(&id));
    }
    let events = stream::unfold(Some(0usize), move |cursor| {
        let (state, id) = (state.clone(), id.clone());
        async move {
            let sent = cursor?;
            loop {
                let (job, iterations) = state.job_snapshot(&id)?;
                let mut batch: Vec<Event> = iterations
                    .iter()
                    .skip(sent)
                    .map(|it| Event::default().event("iteration").data(it.to_string()))
                    .collect();
                if matches!(job.status, JobStatus::Succeeded | JobStatus::Failed) {
                    let record = serde_json::to_string(&job).unwrap_or_default();
                    batch.push(Event::default().event("done").data(record));
                    return Some((batch, None));
                }
                if !batch.is_empty() {
                    return Some((batch, Some(iterations.len())));
                }
                tokio::time::sleep(EVENT_POLL).await;
            }
        }
    })
    .flat_map(|batch| stream::iter(batch.into_iter().map(Ok)));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

#[derive(Serialize)]
struct JobSummary {
    id: String,
    twin_id: String,
    planner: PlannerKind,
    status: JobStatus,
    updated_at: String,
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> Json<Vec<JobSummary>> {
    Json(
        state
            .store()
            .jobs()
            .map(|j| JobSummary {
                id: j.id.clone(),
                twin_id: j.twin_id.clone(),
                planner: j.planner,
                status: j.status,
                updated_at: j.updated_at.clone(),
            })
            .collect(),
    )
}

// ---- decisions ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionRequest {
    twin_id: String,
    plan: String,
    verdict: Verdict,
    note: String,
    #[serde(default)]
    job_id: Option<String>,
}

async fn create_decision(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: DecisionRequest = decode(&body)?;
    if req.note.trim().is_empty() {
        return Err(ApiError::unprocessable("note-required", "a reviewer note is required"));
    }
    UsagePlan::parse(&req.plan).map_err(|v| ApiError::violations("plan-invalid", &v))?;
    let mut store = state.store();
    if store.twin(&req.twin_id).is_none() {
        return Err(twin_not_found(&req.twin_id));
    }
    if let Some(job) = &req.job_id {
        if store.job(job).is_none() {
            return Err(job_not_found(job));
        }
    }
    let decision = DecisionRecord {
        id: store.new_id("decision"),
        twin_id: req.twin_id,
        plan: req.plan,
        verdict: req.verdict,
        note: req.note,
        job_id: req.job_id,
        created_at: now(),
    };
    store.insert_decision(decision.clone()).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(created(&format!("/decisions/{}", decision.id), &decision))
}

async fn get_decision(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<DecisionRecord>> {
    state.store().decision(&id).cloned().map(Json).ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "decision-not-found", format!("no decision with id `{id}`"))
    })
}

async fn list_decisions(
    State(state): State<Arc<AppState>>,
    Query(filter): Query<BTreeMap<String, String>>,
) -> Json<Vec<DecisionRecord>> {
    let twin = filter.get("twin_id");
    Json(state.store().decisions().filter(|d| twin.is_none_or(|t| *t == d.twin_id)).cloned().collect())
}
