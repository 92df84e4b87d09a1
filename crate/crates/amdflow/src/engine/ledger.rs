//! Append-only run ledger.
//!
//! Every task state transition is one JSON line. Appends go through a
//! single buffered writer and are flushed per line, so a killed process
//! loses at most the line being written; replay tolerates exactly that
//! one torn trailing line and treats damage anywhere else as fatal.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EngineError, Stage, TaskKey};

/// State names as they appear in ledger records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordState {
    Pending,
    Running,
    Done,
    Failed,
    Skipped,
}

impl RecordState {
    pub fn name(self) -> &'static str {
        match self {
            RecordState::Pending => "pending",
            RecordState::Running => "running",
            RecordState::Done => "done",
            RecordState::Failed => "failed",
            RecordState::Skipped => "skipped",
        }
    }
}

/// One ledger line: a task's transition into `state`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub key: TaskKey,
    pub stage: Stage,
    pub state: RecordState,
    pub attempts: u32,
    pub outputs_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Serialized appender for ledger lines.
pub struct LedgerWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LedgerWriter {
    pub fn append_to(path: &Path) -> Result<LedgerWriter, EngineError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| EngineError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(LedgerWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    /// Appends one record and flushes it to the OS.
    pub fn append(&mut self, record: &LedgerRecord) -> Result<(), EngineError> {
        let io_err = |source| EngineError::Io {
            path: self.path.clone(),
            source,
        };
        let line = serde_json::to_string(record).expect("ledger records always serialize");
        self.out.write_all(line.as_bytes()).map_err(io_err)?;
        self.out.write_all(b"\n").map_err(io_err)?;
        self.out.flush().map_err(io_err)
    }
}

/// Latest replayed state of one task key.
#[derive(Debug, Clone)]
pub struct ReplayedTask {
    pub stage: Stage,
    pub state: RecordState,
    pub attempts: u32,
    pub outputs_path: PathBuf,
    pub error: Option<String>,
}

/// Replays a ledger into the latest state per key, in first-seen key
/// order. A torn final line is dropped with a warning; a corrupt line
/// anywhere else fails with its 1-based index when `strict` (resume)
/// and is skipped otherwise (read-only status views).
pub fn replay(path: &Path, strict: bool) -> Result<Vec<(TaskKey, ReplayedTask)>, EngineError> {
    let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let lines: Vec<&str> = text.lines().collect();
    let mut order: Vec<TaskKey> = Vec::new();
    let mut tasks: HashMap<TaskKey, ReplayedTask> = HashMap::new();
    for (idx, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LedgerRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                if idx + 1 == lines.len() {
                    log::warn!(
                        "{}: dropping torn final ledger line: {e}",
                        path.display()
                    );
                    break;
                }
                if strict {
                    return Err(EngineError::CorruptLedger {
                        path: path.to_path_buf(),
                        index: idx + 1,
                        reason: e.to_string(),
                    });
                }
                log::warn!("{}:{}: skipping corrupt ledger line", path.display(), idx + 1);
                continue;
            }
        };
        let entry = tasks.entry(record.key.clone()).or_insert_with(|| {
            order.push(record.key.clone());
            ReplayedTask {
                stage: record.stage,
                state: record.state,
                attempts: record.attempts,
                outputs_path: record.outputs_path.clone(),
                error: None,
            }
        });
        entry.stage = record.stage;
        entry.state = record.state;
        entry.attempts = record.attempts;
        entry.outputs_path = record.outputs_path;
        entry.error = record.error;
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let task = tasks.remove(&key).expect("ordered keys exist");
            (key, task)
        })
        .collect())
}

/// Read-only view of a ledger for reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StatusReport {
    /// Tasks per state, all five states always present.
    pub state_counts: BTreeMap<String, u64>,
    /// stage -> state -> count, stages present only when seen.
    pub stage_counts: BTreeMap<String, BTreeMap<String, u64>>,
    /// Failed tasks and their recorded causes.
    pub failures: Vec<(TaskKey, String)>,
}

/// Summarizes a ledger without touching the scheduler: safe to call
/// while another process is running the workflow.
pub fn status(path: &Path) -> Result<StatusReport, EngineError> {
    let tasks = replay(path, false)?;
    let mut report = StatusReport::default();
    for state in ["pending", "running", "done", "failed", "skipped"] {
        report.state_counts.insert(state.to_string(), 0);
    }
    for (key, task) in tasks {
        *report
            .state_counts
            .get_mut(task.state.name())
            .expect("all states pre-seeded") += 1;
        *report
            .stage_counts
            .entry(task.stage.name().to_string())
            .or_default()
            .entry(task.state.name().to_string())
            .or_default() += 1;
        if task.state == RecordState::Failed {
            report
                .failures
                .push((key, task.error.unwrap_or_else(|| "unknown cause".to_string())));
        }
    }
    Ok(report)
}
