use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use aidtwin::files::{self, FileError, FitReport};
use aidtwin::ingest::{self, IngestConfig};
use aidtwin::llm::{HttpChatModel, LlmConfig, ReplayChatModel, TranscriptRecorder, DEFAULT_TOKEN_ENV};
use aidtwin::refine::{refine_llm, refine_local, PlannerKind};
use aidtwin::report::trace_svg;
use aidtwin::service::{self, LlmBackend, ServiceConfig, DEFAULT_WORKERS};
use aidtwin_core::ident::{FitConfig, ParamId};
use aidtwin_core::planner::PlannerError;
use aidtwin_core::safety::evaluate_trace;
use aidtwin_core::{fit, simulate, Bounds, PatientParams, PlanContext, Scenario, ScoreWeights, SimConfig, UsagePlan};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Digital twin workflow for automated insulin delivery usage plans.
#[derive(Parser)]
#[command(name = "aidtwin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Identify twin parameters from CGM and pump logs.
    Fit(FitArgs),
    /// Simulate a plan and write the trace as CSV.
    Simulate {
        #[command(flatten)]
        inputs: PlanInputs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score a plan against a safety formula; exit 0 iff it holds.
    Evaluate {
        #[command(flatten)]
        inputs: PlanInputs,
        #[arg(long)]
        spec: PathBuf,
    },
    /// Improve the plan for a planning context.
    Refine(RefineArgs),
    /// Render a trace CSV as SVG with the 70-180 mg/dL band shaded.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        title: Option<String>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_WORKERS)]
        workers: usize,
        /// Serve `planner: llm` jobs from this transcript.
        #[arg(long)]
        llm_transcript: Option<PathBuf>,
        /// Enable `planner: llm` jobs against the configured endpoint.
        #[arg(long, conflicts_with = "llm_transcript")]
        llm_live: bool,
        #[command(flatten)]
        llm: LlmArgs,
    },
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    cgm: PathBuf,
    #[arg(long)]
    pump: PathBuf,
    /// `name lo hi` per free parameter (default: p1 p2 p3 n alpha_ex).
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Twin file with the starting parameters.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = FitConfig::default().starts)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CGM grid spacing (min).
    #[arg(long, default_value_t = 5.0)]
    grid: f64,
    /// Longest CGM gap bridged by interpolation (min).
    #[arg(long, default_value_t = 30.0)]
    max_gap: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    twin: PathBuf,
    #[arg(long)]
    context: PathBuf,
    #[arg(long, value_enum)]
    planner: PlannerKind,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replay LLM replies from this transcript instead of calling the endpoint.
    #[arg(long, conflicts_with = "record")]
    transcript: Option<PathBuf>,
    /// Record the live LLM exchange to this transcript.
    #[arg(long)]
    record: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmArgs,
    /// Best plan file.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Full refinement result (log, best plan, verification) as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PlanInputs {
    #[arg(long)]
    twin: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    /// Integrator step (min).
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// Output sample spacing (min).
    #[arg(long, default_value_t = 5.0)]
    sample_interval: f64,
}

#[derive(Args)]
struct LlmArgs {
    #[arg(long, default_value_t = LlmConfig::default().base_url)]
    llm_base_url: String,
    #[arg(long, default_value_t = LlmConfig::default().model)]
    llm_model: String,
    /// Environment variable holding the API token.
    #[arg(long, default_value = DEFAULT_TOKEN_ENV)]
    llm_token_env: String,
    /// Per-request timeout (s).
    #[arg(long, default_value_t = 60)]
    llm_timeout: u64,
    #[arg(long, default_value_t = 2)]
    llm_retries: u32,
}

impl LlmArgs {
    fn config(&self) -> LlmConfig {
        LlmConfig {
            base_url: self.llm_base_url.clone(),
            model: self.llm_model.clone(),
            token_env: self.llm_token_env.clone(),
            timeout: Duration::from_secs(self.llm_timeout),
            retries: self.llm_retries,
            temperature: 0.0,
        }
    }
}

struct CliError {
    code: &'static str,
    message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<FileError> for CliError {
    fn from(e: FileError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

fn parse_file<T, E: std::fmt::Display>(
    path: &Path,
    parse: impl FnOnce(&str) -> Result<T, E>,
    code: &'static str,
) -> Result<T, CliError> {
    let text = files::read_text(path)?;
    parse(&text).map_err(|e| CliError::new(code, format!("{}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => files::write_bytes(p, bytes)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| CliError::new("io-error", e.to_string()))?;
        }
    }
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("results serialize");
    bytes.push(b'\n');
    bytes
}

fn run_fit(args: &FitArgs) -> Result<ExitCode, CliError> {
    let ingest_config = IngestConfig { grid: args.grid, max_gap: args.max_gap };
    let series = ingest::load_cgm(&args.cgm, &ingest_config).map_err(|e| CliError::new(e.code(), e.to_string()))?;
    let pump_log = ingest::load_pump(&args.pump).map_err(|e| CliError::new(e.code(), e.to_string()))?;
    for w in &series.warnings {
        eprintln!("warning: {w}");
    }
    let record = ingest::usage_record(&series, &pump_log);
    let bounds = match &args.bounds {
        Some(p) => files::load_bounds(p)?,
        None => Bounds::defaults_for(&ParamId::DEFAULT_FREE),
    };
    let init = match &args.init {
        Some(p) => files::load_twin(p)?,
        None => PatientParams::NOMINAL_ADULT,
    };
    let config = FitConfig { starts: args.starts, seed: args.seed, ..FitConfig::default() };
    let result = fit(&record, &init, &bounds, &config).map_err(|e| CliError::new("fit-failed", e.to_string()))?;
    let report = FitReport {
        record_start: ingest::format_timestamp(series.start),
        record_minutes: record.span(),
        warnings: series.warnings,
        fit: result,
    };
    files::write_bytes(&args.output, &json_bytes(&report))?;
    Ok(ExitCode::SUCCESS)
}

fn load_plan_inputs(inputs: &PlanInputs) -> Result<(PatientParams, UsagePlan, Scenario, SimConfig), CliError> {
    let params = files::load_twin(&inputs.twin)?;
    let plan = parse_file(&inputs.plan, UsagePlan::parse, "plan-invalid")?;
    let scenario = parse_file(&inputs.scenario, Scenario::parse, "scenario-invalid")?;
    let sim = SimConfig { dt: inputs.dt, sample_interval: inputs.sample_interval, ..SimConfig::default() };
    Ok((params, plan, scenario, sim))
}

fn run_refine(args: &RefineArgs) -> Result<ExitCode, CliError> {
    let RefineArgs { twin, context, planner, budget, seed, transcript, record, llm, output, log } = args;
    let (budget, seed, output, log) = (*budget, *seed, output.as_deref(), log.as_deref());
    let params = files::load_twin(twin)?;
    let ctx = parse_file(context, |t| PlanContext::parse(t, params), "context-invalid")?;
    let result = match *planner {
        PlannerKind::Local => refine_local(&ctx, budget, seed),
        PlannerKind::Llm => match (transcript.as_deref(), record.as_deref()) {
            (Some(path), _) => {
                let mut model = ReplayChatModel::open(path).map_err(|m| CliError::new("invalid-file", m))?;
                refine_llm(&ctx, &mut model, budget)
            }
            (None, rec) => {
                let mut model = HttpChatModel::new(llm.config());
                if let Some(path) = rec {
                    let recorder = TranscriptRecorder::create(path)
                        .map_err(|e| CliError::new("io-error", format!("{}: {e}", path.display())))?;
                    model = model.with_recorder(recorder);
                }
                refine_llm(&ctx, &mut model, budget)
            }
        },
    };
    let out = result.map_err(|e| match e {
        PlannerError::InfeasibleContext(m) => CliError::new("infeasible-context", m),
        PlannerError::InvalidContext(m) => CliError::new("context-invalid", m),
        PlannerError::Failure { message, log, .. } => {
            CliError::new("planner-failure", format!("{message} (after {} evaluated plan(s))", log.iterations.len()))
        }
    })?;
    if let Some(path) = log {
        files::write_bytes(path, &json_bytes(&out))?;
    }
    match (&out.best_plan, output) {
        (Some(plan), Some(path)) => files::write_bytes(path, plan.as_bytes())?,
        (Some(plan), None) if log.is_some() => write_output(None, plan.as_bytes())?,
        (_, None) => write_output(None, &json_bytes(&out))?,
        (None, Some(_)) => return Err(CliError::new("no-plan", "no candidate plan could be evaluated")),
    }
    let summary = serde_json::json!({
        "stop_reason": out.stop_reason,
        "safe": out.safe,
        "iterations": out.log.iterations.len(),
        "robustness": out.verified_robustness,
    });
    eprintln!("{summary}");
    Ok(if out.safe { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Fit(args) => run_fit(&args),
        Command::Simulate { inputs, output } => {
            let (params, plan, scenario, sim) = load_plan_inputs(&inputs)?;
            let trace = simulate(&params, &plan, &scenario, &sim)
                .map_err(|e| CliError::new("simulation-failed", e.to_string()))?;
            write_output(output.as_deref(), files::trace_csv(&trace).as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { inputs, spec } => {
            let (params, plan, scenario, sim) = load_plan_inputs(&inputs)?;
            let spec = files::load_spec(&spec)?;
            let trace = simulate(&params, &plan, &scenario, &sim)
                .map_err(|e| CliError::new("simulation-failed", e.to_string()))?;
            let quality = evaluate_trace(&trace, &spec, &ScoreWeights::default())
                .map_err(|e| CliError::new("evaluation-failed", e.to_string()))?;
            write_output(None, &json_bytes(&quality))?;
            Ok(if quality.is_safe() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Refine(args) => run_refine(&args),
        Command::Report { trace, title, output } => {
            let parsed = parse_file(&trace, files::parse_trace_csv, "invalid-file")?;
            let title = title.unwrap_or_else(|| trace.display().to_string());
            files::write_bytes(&output, trace_svg(&parsed, &title).as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { addr, store, ui_dir, workers, llm_transcript, llm_live, llm } => {
            let backend = match (llm_transcript, llm_live) {
                (Some(path), _) => LlmBackend::Replay(
                    aidtwin::llm::read_transcript(&path).map_err(|m| CliError::new("invalid-file", m))?,
                ),
                (None, true) => LlmBackend::Http(llm.config()),
                (None, false) => LlmBackend::Disabled,
            };
            let config = ServiceConfig { workers, llm: backend, ui_dir };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io-error", e.to_string()))?;
            runtime.block_on(service::serve(addr, &store, config)).map_err(|m| CliError::new("service-failed", m))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let line = serde_json::json!({ "error": e.code, "message": e.message });
            let mut err = BufWriter::new(std::io::stderr().lock());
            let _ = writeln!(err, "{line}");
            ExitCode::from(2)
        }
    }
}
