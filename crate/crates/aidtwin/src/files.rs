//! On-disk formats used by the CLI: twin JSON, trace CSV, bounds and spec files.

use std::fmt::Write as _;
use std::path::Path;

use aidtwin_core::ident::{FitResult, ParamId};
use aidtwin_core::{Bounds, GlucoseTrace, PatientParams, StlFormula};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl FileError {
    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format { path: path.display().to_string(), message: message.into() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io-error",
            Self::Format { .. } => "invalid-file",
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, FileError> {
    std::fs::read_to_string(path).map_err(|source| FileError::Io { path: path.display().to_string(), source })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FileError> {
    std::fs::write(path, bytes).map_err(|source| FileError::Io { path: path.display().to_string(), source })
}

/// Output of `aidtwin fit`, also accepted wherever a twin file is expected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Wall-clock time of the first CGM grid point; record times count from here.
    pub record_start: String,
    pub record_minutes: f64,
    pub warnings: Vec<String>,
    #[serde(flatten)]
    pub fit: FitResult,
}

/// Parameters from a JSON object holding either the parameters themselves or a
/// `params` member (fit reports, service twin records). Missing parameters take
/// their nominal adult values; unknown keys are rejected.
pub fn params_from_json(value: &Value) -> Result<PatientParams, String> {
    let obj = match value.get("params") {
        Some(inner) => inner,
        None => value,
    };
    let Value::Object(given) = obj else {
        return Err("expected a JSON object of patient parameters".into());
    };
    let mut merged = serde_json::to_value(PatientParams::NOMINAL_ADULT).expect("params serialize");
    let Value::Object(base) = &mut merged else { unreachable!() };
    for (k, v) in given {
        if !base.contains_key(k) {
            return Err(format!("unknown parameter `{k}`"));
        }
        base.insert(k.clone(), v.clone());
    }
    let params: PatientParams = serde_json::from_value(merged).map_err(|e| e.to_string())?;
    params.validate().map_err(|e| e.to_string())?;
    Ok(params)
}

pub fn load_twin(path: &Path) -> Result<PatientParams, FileError> {
    let text = read_text(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| FileError::format(path, e.to_string()))?;
    params_from_json(&value).map_err(|m| FileError::format(path, m))
}

pub fn load_spec(path: &Path) -> Result<StlFormula, FileError> {
    let text = read_text(path)?;
    parse_spec(&text).map_err(|m| FileError::format(path, m))
}

/// Formula text with `#` comments and line breaks allowed.
pub fn parse_spec(text: &str) -> Result<StlFormula, String> {
    let joined: Vec<&str> =
        text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()).collect();
    StlFormula::parse(&joined.join(" ")).map_err(|e| e.to_string())
}

/// Bounds file: one `name lo hi` line per free parameter, `#` comments.
pub fn parse_bounds(text: &str) -> Result<Bounds, String> {
    let mut bounds = Bounds { entries: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, lo, hi] = fields[..] else {
            return Err(format!("line {}: expected `name lo hi`", i + 1));
        };
        let id = ParamId::from_name(name).ok_or_else(|| format!("line {}: unknown parameter `{name}`", i + 1))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: `{s}` is not a number", i + 1));
        if bounds.entries.iter().any(|e| e.0 == id) {
            return Err(format!("line {}: {name} listed twice", i + 1));
        }
        bounds.entries.push((id, num(lo)?, num(hi)?));
    }
    if bounds.entries.is_empty() {
        return Err("no parameters listed".into());
    }
    Ok(bounds)
}

pub fn load_bounds(path: &Path) -> Result<Bounds, FileError> {
    parse_bounds(&read_text(path)?).map_err(|m| FileError::format(path, m))
}

pub const TRACE_HEADER: &str = "t_min,glucose_mgdl,insulin_U";

pub fn trace_csv(trace: &GlucoseTrace) -> String {
    let mut out = String::with_capacity(32 * trace.len());
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (i, (g, u)) in trace.samples.iter().zip(&trace.insulin_delivered).enumerate() {
        let _ = writeln!(out, "{},{},{}", trace.time_at(i), g, u);
    }
    out
}

pub fn parse_trace_csv(text: &str) -> Result<GlucoseTrace, String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_HEADER => {}
        Some((_, h)) => return Err(format!("expected header `{TRACE_HEADER}`, found `{}`", h.trim())),
        None => return Err("empty trace file".into()),
    }
    let (mut times, mut glucose, mut insulin) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [t, g, u] = cols[..] else {
            return Err(format!("line {}: expected 3 columns", i + 1));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: `{s}` is not a number", i + 1));
        times.push(num(t)?);
        glucose.push(num(g)?);
        insulin.push(num(u)?);
    }
    let t0 = times[0];
    let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    for (k, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err(format!("sample {} breaks the uniform spacing of {dt} min", k + 2));
        }
    }
    GlucoseTrace::with_insulin(t0, dt, glucose, insulin).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_params_fill_from_nominal() {
        let p = params_from_json(&serde_json::json!({"p1": 0.02})).unwrap();
        assert_eq!(p, PatientParams { p1: 0.02, ..PatientParams::NOMINAL_ADULT });
        let wrapped = params_from_json(&serde_json::json!({"params": {"n": 0.1}, "rmse": 1.0})).unwrap();
        assert_eq!(wrapped.n, 0.1);
        assert!(params_from_json(&serde_json::json!({"p9": 1})).is_err());
        assert!(params_from_json(&serde_json::json!({"p1": -1})).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = GlucoseTrace::with_insulin(0.0, 5.0, vec![120.0, 118.25, 90.5], vec![0.1, 0.0, 3.0]).unwrap();
        assert_eq!(parse_trace_csv(&trace_csv(&trace)).unwrap(), trace);
    }

    #[test]
    fn bounds_lines() {
        let b = parse_bounds("# free parameters\np1 0.005 0.05\nn 0.05 0.2 # clearance\n").unwrap();
        assert_eq!(b.entries, vec![(ParamId::P1, 0.005, 0.05), (ParamId::N, 0.05, 0.2)]);
        assert!(parse_bounds("p1 0.1").unwrap_err().contains("line 1"));
        assert!(parse_bounds("zz 0 1").is_err());
    }
}
