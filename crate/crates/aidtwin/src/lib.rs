//! File formats, CSV ingestion, the LLM transport, the HTTP review service and the
//! CLI plumbing around [`aidtwin_core`].

pub mod files;
pub mod ingest;
pub mod llm;
pub mod refine;
pub mod report;
pub mod service;
pub mod store;

pub use aidtwin_core as core;
