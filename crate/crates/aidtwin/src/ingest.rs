//! CGM and pump CSV loading.
//!
//! CGM files have the header `timestamp,glucose_mgdl`, pump files
//! `timestamp,kind,value` with `kind` one of `basal` (U/h, holding until the next
//! basal row), `bolus` (U) or `meal` (g). Timestamps are RFC 3339 in UTC.
//!
//! CGM readings are put on a uniform grid anchored at the first reading: each
//! reading is taken verbatim at its nearest grid point, grid points without a
//! reading are interpolated linearly. Gaps longer than [`IngestConfig::max_gap`]
//! split the record and only the longest piece is kept.

use std::io::{Read, Write};
use std::path::Path;

use aidtwin_core::ident::TimedValue;
use aidtwin_core::{GlucoseTrace, UsageRecord};
use chrono::{DateTime, SecondsFormat, TimeDelta, Utc};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("line {line}: timestamp goes backwards ({time} after {previous})")]
    NonMonotonic { line: u64, time: String, previous: String },
    #[error("missing or wrong header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("no data rows")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Row { .. } => "bad-row",
            Self::NonMonotonic { .. } => "non-monotonic",
            Self::Header { .. } => "bad-header",
            Self::Empty => "empty-file",
            Self::Csv(_) => "bad-csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    /// Output grid spacing (min).
    pub grid: f64,
    /// Longest gap bridged by interpolation (min).
    pub max_gap: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { grid: 5.0, max_gap: 30.0 }
    }
}

/// Resampled CGM series.
#[derive(Debug, Clone, PartialEq)]
pub struct CgmSeries {
    /// Wall-clock time of the first sample.
    pub start: DateTime<Utc>,
    pub trace: GlucoseTrace,
    /// One entry per discarded piece of the record.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PumpLog {
    pub basal: Vec<(DateTime<Utc>, f64)>,
    pub bolus: Vec<(DateTime<Utc>, f64)>,
    pub meal: Vec<(DateTime<Utc>, f64)>,
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, String> {
    let t = DateTime::parse_from_rfc3339(s.trim()).map_err(|e| format!("bad timestamp `{s}`: {e}"))?;
    if t.offset().local_minus_utc() != 0 {
        return Err(format!("timestamp `{s}` is not UTC"));
    }
    Ok(t.with_timezone(&Utc))
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

fn minutes_between(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    (to - from).num_milliseconds() as f64 / 60_000.0
}

fn after_minutes(from: DateTime<Utc>, minutes: f64) -> DateTime<Utc> {
    from + TimeDelta::milliseconds((minutes * 60_000.0).round() as i64)
}

fn parse_value(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("bad value `{s}`"))?;
    if !v.is_finite() {
        return Err(format!("value `{s}` is not finite"));
    }
    if v < 0.0 {
        return Err(format!("negative value {v}"));
    }
    Ok(v)
}

fn reader<R: Read>(input: R, expected: &'static [&'static str]) -> Result<csv::Reader<R>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != expected {
        return Err(IngestError::Header { expected: expected.join(","), found: header.join(",") });
    }
    Ok(rdr)
}

fn row_err(record: &csv::StringRecord, message: String) -> IngestError {
    IngestError::Row { line: record.position().map_or(0, |p| p.line()), message }
}

/// Reads CGM rows: in file order, equal timestamps replaced by the later row.
fn read_cgm_rows<R: Read>(input: R) -> Result<Vec<(DateTime<Utc>, f64)>, IngestError> {
    let mut rdr = reader(input, &["timestamp", "glucose_mgdl"])?;
    let mut rows: Vec<(DateTime<Utc>, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(row_err(&rec, format!("expected 2 fields, found {}", rec.len())));
        }
        let t = parse_timestamp(&rec[0]).map_err(|m| row_err(&rec, m))?;
        let g = parse_value(&rec[1]).map_err(|m| row_err(&rec, m))?;
        if g == 0.0 {
            return Err(row_err(&rec, "glucose must be > 0".into()));
        }
        match rows.last_mut() {
            Some(last) if last.0 == t => last.1 = g,
            Some(last) if last.0 > t => {
                return Err(IngestError::NonMonotonic {
                    line: rec.position().map_or(0, |p| p.line()),
                    time: format_timestamp(t),
                    previous: format_timestamp(last.0),
                })
            }
            _ => rows.push((t, g)),
        }
    }
    if rows.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(rows)
}

/// Uniform grid over one gap-free run of readings (times in minutes from `rows[0]`).
/// Each reading lands on its nearest grid point (closest reading wins, ties go to
/// the later one); the first and last readings always keep their points, the last
/// moving one point forward if it would share the first one. Empty grid points are
/// interpolated between the readings around them.
fn resample(rows: &[(f64, f64)], grid: f64) -> Vec<f64> {
    let t0 = rows[0].0;
    let slot = |t: f64| ((t - t0) / grid).round() as usize;
    let last = rows.len() - 1;
    let n = if last == 0 { 1 } else { (slot(rows[last].0) + 1).max(2) };
    let mut snapped: Vec<Option<(f64, f64)>> = vec![None; n];
    for (i, &(t, g)) in rows.iter().enumerate() {
        let k = if i == last { n - 1 } else { slot(t) };
        // the end readings always keep their grid points
        let dist = if i == 0 || i == last { -1.0 } else { (t - (t0 + k as f64 * grid)).abs() };
        if snapped[k].is_none_or(|(d, _)| dist <= d && d >= 0.0) {
            snapped[k] = Some((dist, g));
        }
    }
    let mut j = 0;
    (0..n)
        .map(|k| {
            if let Some((_, g)) = snapped[k] {
                return g;
            }
            let t = t0 + k as f64 * grid;
            while rows[j + 1].0 < t {
                j += 1;
            }
            let (a, b) = (rows[j], rows[j + 1]);
            a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
        })
        .collect()
}

pub fn parse_cgm<R: Read>(input: R, config: &IngestConfig) -> Result<CgmSeries, IngestError> {
    let rows = read_cgm_rows(input)?;
    // split at gaps the interpolation may not bridge
    let mut pieces: Vec<&[(DateTime<Utc>, f64)]> = Vec::new();
    let mut begin = 0;
    for i in 1..rows.len() {
        if minutes_between(rows[i - 1].0, rows[i].0) > config.max_gap {
            pieces.push(&rows[begin..i]);
            begin = i;
        }
    }
    pieces.push(&rows[begin..]);
    let span = |p: &[(DateTime<Utc>, f64)]| p[p.len() - 1].0 - p[0].0;
    let best = (0..pieces.len())
        .max_by(|&a, &b| span(pieces[a]).cmp(&span(pieces[b])).then(b.cmp(&a)))
        .expect("at least one piece");
    let warnings = pieces
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, p)| {
            format!(
                "discarded {} reading(s) from {} to {} (separated by a gap over {} min)",
                p.len(),
                format_timestamp(p[0].0),
                format_timestamp(p[p.len() - 1].0),
                config.max_gap
            )
        })
        .collect();
    let piece = pieces[best];
    let start = piece[0].0;
    let rel: Vec<(f64, f64)> = piece.iter().map(|&(t, g)| (minutes_between(start, t), g)).collect();
    let samples = resample(&rel, config.grid);
    let trace = GlucoseTrace::new(0.0, config.grid, samples)
        .map_err(|e| IngestError::Row { line: 0, message: e.to_string() })?;
    Ok(CgmSeries { start, trace, warnings })
}

pub fn parse_pump<R: Read>(input: R) -> Result<PumpLog, IngestError> {
    let mut rdr = reader(input, &["timestamp", "kind", "value"])?;
    let mut log = PumpLog::default();
    let mut any = false;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(row_err(&rec, format!("expected 3 fields, found {}", rec.len())));
        }
        let t = parse_timestamp(&rec[0]).map_err(|m| row_err(&rec, m))?;
        let v = parse_value(&rec[2]).map_err(|m| row_err(&rec, m))?;
        let list = match &rec[1] {
            "basal" => &mut log.basal,
            "bolus" => &mut log.bolus,
            "meal" => &mut log.meal,
            other => return Err(row_err(&rec, format!("unknown kind `{other}` (expected basal, bolus or meal)"))),
        };
        list.push((t, v));
        any = true;
    }
    if !any {
        return Err(IngestError::Empty);
    }
    for list in [&mut log.basal, &mut log.bolus, &mut log.meal] {
        list.sort_by_key(|e| e.0);
    }
    Ok(log)
}

fn open(path: &Path) -> Result<std::fs::File, IngestError> {
    std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })
}

pub fn load_cgm(path: &Path, config: &IngestConfig) -> Result<CgmSeries, IngestError> {
    parse_cgm(open(path)?, config)
}

pub fn load_pump(path: &Path) -> Result<PumpLog, IngestError> {
    parse_pump(open(path)?)
}

/// Combines both files into a record on the CGM clock (minutes from the first
/// retained CGM sample).
pub fn usage_record(cgm: &CgmSeries, pump: &PumpLog) -> UsageRecord {
    let rel = |list: &[(DateTime<Utc>, f64)]| -> Vec<TimedValue> {
        list.iter().map(|&(t, v)| TimedValue::new(minutes_between(cgm.start, t), v)).collect()
    };
    UsageRecord {
        cgm: cgm.trace.clone(),
        basal_log: rel(&pump.basal),
        bolus_log: rel(&pump.bolus),
        meal_log: rel(&pump.meal),
    }
}

/// Writes the CGM part of `record` as a CGM CSV with the first sample at `start`.
pub fn write_cgm<W: Write>(out: W, record: &UsageRecord, start: DateTime<Utc>) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "glucose_mgdl"])?;
    for (i, g) in record.cgm.samples.iter().enumerate() {
        let t = after_minutes(start, record.cgm.time_at(i));
        w.write_record([format_timestamp(t), g.to_string()])?;
    }
    w.flush().map_err(|source| IngestError::Io { path: "<output>".into(), source })
}

/// Writes the pump logs of `record` as a pump CSV (rows in time order).
pub fn write_pump<W: Write>(out: W, record: &UsageRecord, start: DateTime<Utc>) -> Result<(), IngestError> {
    let mut rows: Vec<(f64, &str, f64)> = Vec::new();
    for (kind, log) in [("basal", &record.basal_log), ("bolus", &record.bolus_log), ("meal", &record.meal_log)] {
        rows.extend(log.iter().map(|e| (e.time, kind, e.value)));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "kind", "value"])?;
    for (t, kind, v) in rows {
        w.write_record([format_timestamp(after_minutes(start, t)), kind.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|source| IngestError::Io { path: "<output>".into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_other_than_utc_are_rejected() {
        assert!(parse_timestamp("2024-03-01T08:00:00Z").is_ok());
        assert!(parse_timestamp("2024-03-01T08:00:00+00:00").is_ok());
        assert!(parse_timestamp("2024-03-01T08:00:00+01:00").unwrap_err().contains("not UTC"));
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn jittered_readings_snap_to_the_grid() {
        let rows = [(0.0, 100.0), (5.5, 110.0), (9.0, 120.0), (15.0, 130.0)];
        assert_eq!(resample(&rows, 5.0), [100.0, 110.0, 120.0, 130.0]);
    }
}
