//! Pipeline stage 7: rank the detections for analyst review.
//!
//! One built-in ranker: priority = anomaly score. Dependency-impact
//! propagation is not implemented; the stage keeps the cache chain at
//! seven links and gives configs a stable hook.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::ScoreReport;
use crate::ingest::EntityId;
use crate::Real;

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("triage io at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageResult {
    /// (node, priority) sorted by priority descending, ties by node id.
    pub ranked: Vec<(EntityId, Real)>,
}

pub fn triage_by_score(report: &ScoreReport) -> TriageResult {
    let mut ranked = report.detections();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    TriageResult { ranked }
}

pub const TRIAGE_FILE: &str = "triage.csv";

pub fn write_triage_table(result: &TriageResult, out_dir: &Path) -> Result<PathBuf, TriageError> {
    let path = out_dir.join(TRIAGE_FILE);
    let fail = |e: std::io::Error| TriageError::Io { path: path.clone(), message: e.to_string() };
    let mut w = BufWriter::new(File::create(&path).map_err(fail)?);
    writeln!(w, "rank,node_id,priority").map_err(fail)?;
    for (rank, (id, priority)) in result.ranked.iter().enumerate() {
        writeln!(w, "{},{},{}", rank + 1, id, priority).map_err(fail)?;
    }
    w.flush().map_err(fail)?;
    Ok(path)
}
