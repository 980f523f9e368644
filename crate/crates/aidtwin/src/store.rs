//! Single-file append-only store for twins, refinement jobs and review decisions.
//!
//! Every change is one JSON line `{"type": ..., "record": {...}}` appended to the
//! file; the in-memory index is rebuilt by replaying the file on open. Job records
//! are re-appended on each status change and the latest line wins. Twins and
//! decisions are written once and never replaced.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};

use aidtwin_core::ident::FitResult;
use aidtwin_core::PatientParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::refine::{PlannerKind, RefineOutput};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("store {path} line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("record {0} already exists")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub params: PatientParams,
    /// `"manual"` for explicit parameters, `"fit"` when identified from a record.
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
    pub created_at: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub twin_id: String,
    pub planner: PlannerKind,
    pub budget: usize,
    pub seed: u64,
    pub context: String,
    pub status: JobStatus,
    pub created_at: String,
    pub updated_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<RefineOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<JobError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub twin_id: String,
    /// Plan text as reviewed.
    pub plan: String,
    pub verdict: Verdict,
    pub note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", content = "record", rename_all = "lowercase")]
enum Entry {
    Twin(TwinRecord),
    Job(JobRecord),
    Decision(DecisionRecord),
}

pub struct Store {
    file: Option<(File, PathBuf)>,
    twins: BTreeMap<String, TwinRecord>,
    jobs: BTreeMap<String, JobRecord>,
    decisions: BTreeMap<String, DecisionRecord>,
    next_id: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

impl Store {
    /// Store without a backing file.
    pub fn in_memory() -> Self {
        Self { file: None, twins: BTreeMap::new(), jobs: BTreeMap::new(), decisions: BTreeMap::new(), next_id: 1 }
    }

    /// Opens or creates the store file and replays it. An unparseable unterminated
    /// final line (an interrupted append) is dropped and the file truncated before it.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path).map_err(io_err(path))?;
        let mut store = Self::in_memory();
        let mut good_len = 0u64;
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        let mut number = 0;
        let mut missing_newline = false;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io_err(path))?;
            if n == 0 {
                break;
            }
            number += 1;
            if line.trim().is_empty() {
                good_len += n as u64;
                continue;
            }
            let complete = line.ends_with('\n');
            match serde_json::from_str::<Entry>(line.trim_end()) {
                Ok(entry) => {
                    store.apply(entry);
                    good_len += n as u64;
                    if !complete {
                        missing_newline = true;
                    }
                }
                Err(_) if !complete => break,
                Err(e) => {
                    return Err(StoreError::Corrupt {
                        path: path.display().to_string(),
                        line: number,
                        message: e.to_string(),
                    })
                }
            }
        }
        drop(reader);
        if file.metadata().map_err(io_err(path))?.len() != good_len {
            file.set_len(good_len).map_err(io_err(path))?;
            file.seek(std::io::SeekFrom::End(0)).map_err(io_err(path))?;
        }
        if missing_newline {
            file.write_all(b"\n").map_err(io_err(path))?;
        }
        store.file = Some((file, path.to_path_buf()));
        Ok(store)
    }

    fn apply(&mut self, entry: Entry) {
        let id = match &entry {
            Entry::Twin(r) => &r.id,
            Entry::Job(r) => &r.id,
            Entry::Decision(r) => &r.id,
        };
        if let Some(n) = id.rsplit('-').next().and_then(|n| n.parse::<u64>().ok()) {
            self.next_id = self.next_id.max(n + 1);
        }
        match entry {
            Entry::Twin(r) => {
                self.twins.insert(r.id.clone(), r);
            }
            Entry::Job(r) => {
                self.jobs.insert(r.id.clone(), r);
            }
            Entry::Decision(r) => {
                self.decisions.insert(r.id.clone(), r);
            }
        }
    }

    fn append(&mut self, entry: Entry) -> Result<(), StoreError> {
        if let Some((file, path)) = self.file.as_mut() {
            let mut line = serde_json::to_string(&entry).expect("records serialize");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(io_err(path))?;
            file.flush().map_err(io_err(path))?;
        }
        self.apply(entry);
        Ok(())
    }

    /// Fresh identifier, unique across all record kinds.
    pub fn new_id(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}-{:06}", self.next_id);
        self.next_id += 1;
        id
    }

    pub fn insert_twin(&mut self, twin: TwinRecord) -> Result<(), StoreError> {
        if self.twins.contains_key(&twin.id) {
            return Err(StoreError::Duplicate(twin.id));
        }
        self.append(Entry::Twin(twin))
    }

    pub fn insert_decision(&mut self, decision: DecisionRecord) -> Result<(), StoreError> {
        if self.decisions.contains_key(&decision.id) {
            return Err(StoreError::Duplicate(decision.id));
        }
        self.append(Entry::Decision(decision))
    }

    /// Writes a new job or a new state of an existing one.
    pub fn put_job(&mut self, job: JobRecord) -> Result<(), StoreError> {
        self.append(Entry::Job(job))
    }

    pub fn twin(&self, id: &str) -> Option<&TwinRecord> {
        self.twins.get(id)
    }

    pub fn twins(&self) -> impl Iterator<Item = &TwinRecord> {
        self.twins.values()
    }

    pub fn job(&self, id: &str) -> Option<&JobRecord> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    pub fn decision(&self, id: &str) -> Option<&DecisionRecord> {
        self.decisions.get(id)
    }

    pub fn decisions(&self) -> impl Iterator<Item = &DecisionRecord> {
        self.decisions.values()
    }

    /// Canonical dump of the whole index, for comparing states.
    pub fn snapshot(&self) -> String {
        serde_json::to_string(&(&self.twins, &self.jobs, &self.decisions, self.next_id)).expect("records serialize")
    }
}
