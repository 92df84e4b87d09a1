//! Command-line interface: argument parsing, the work-directory lock,
//! human-readable summaries, and the exit-code policy.
//!
//! Exit codes: `0` success, `1` runtime failure (calculations failed,
//! engine fault, lock conflict), `2` usage and configuration errors
//! (bad flags, invalid config, missing snapshot or ledger, a report
//! with nothing to report). Clap's own usage errors also exit with 2.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::engine::{ledger, EngineError, RunSummary};
use crate::pipeline::{self, PipelineError, PipelineOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(
    name = "amdflow",
    about = "Resumable screening workflows for crystal-structure discovery",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Start a workflow in a fresh work directory.
    Run {
        /// Path to the workflow config (TOML).
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Continue an interrupted workflow from its ledger.
    Resume {
        /// Work directory of the interrupted run.
        work_dir: PathBuf,
    },
    /// Summarize a workflow's ledger without touching it.
    Status {
        /// Work directory to inspect.
        work_dir: PathBuf,
    },
    /// Rebuild the hull artifacts from stored calculation results.
    Report {
        /// Work directory holding the results.
        work_dir: PathBuf,
    },
}

/// Initializes logging from the `AMDFLOW_LOG` environment variable
/// (`error`, `warn`, `info`, `debug`; default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new()
        .filter_or("AMDFLOW_LOG", "info")
        .write_style("AMDFLOW_LOG_STYLE");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp_micros()
        .try_init();
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(command: Command) -> i32 {
    match command {
        Command::Run { config } => cmd_run(&config),
        Command::Resume { work_dir } => cmd_resume(&work_dir),
        Command::Status { work_dir } => cmd_status(&work_dir),
        Command::Report { work_dir } => cmd_report(&work_dir),
    }
}

fn cmd_run(config: &Path) -> i32 {
    let cfg = match RunConfig::load(config) {
        Ok(cfg) => cfg,
        Err(e) => return fail_config(&e),
    };
    let _lock = match WorkLock::acquire(&cfg.work_dir) {
        Ok(lock) => lock,
        Err(message) => return fail_runtime(&message),
    };
    match pipeline::run(cfg) {
        Ok(outcome) => finish_run(&outcome),
        Err(e) => fail_pipeline(&e),
    }
}

fn cmd_resume(work_dir: &Path) -> i32 {
    let _lock = match WorkLock::acquire(work_dir) {
        Ok(lock) => lock,
        Err(message) => return fail_runtime(&message),
    };
    match pipeline::resume(work_dir) {
        Ok(outcome) => {
            if outcome.summary.executed == 0 {
                println!("nothing to do: every task was already complete");
            }
            finish_run(&outcome)
        }
        Err(e) => fail_pipeline(&e),
    }
}

fn cmd_status(work_dir: &Path) -> i32 {
    let ledger_path = work_dir.join("ledger.jsonl");
    if !ledger_path.is_file() {
        eprintln!(
            "error: no ledger at {}; not a work directory?",
            ledger_path.display()
        );
        return EXIT_USAGE;
    }
    match ledger::status(&ledger_path) {
        Ok(report) => {
            print!("{}", render_status(&report));
            EXIT_OK
        }
        Err(e) => fail_runtime(&e.to_string()),
    }
}

fn cmd_report(work_dir: &Path) -> i32 {
    let _lock = match WorkLock::acquire(work_dir) {
        Ok(lock) => lock,
        Err(message) => return fail_runtime(&message),
    };
    match pipeline::report(work_dir) {
        Ok(outcome) => {
            println!(
                "report complete: {} of {} stored results converged",
                outcome.converged, outcome.total_results
            );
            print_promoted(&outcome.promoted);
            EXIT_OK
        }
        Err(e) => fail_pipeline(&e),
    }
}

fn finish_run(outcome: &PipelineOutcome) -> i32 {
    print!("{}", render_summary(&outcome.summary));
    if outcome.postprocess_ok {
        print_promoted(&outcome.promoted);
        EXIT_OK
    } else {
        let message = outcome
            .message
            .as_deref()
            .unwrap_or("workflow did not complete");
        eprintln!("error: {message}");
        EXIT_RUNTIME
    }
}

fn print_promoted(promoted: &[String]) {
    if promoted.is_empty() {
        println!("no structures promoted");
    } else {
        println!("promoted {} structure(s):", promoted.len());
        for id in promoted {
            println!("  {id}");
        }
    }
}

fn render_summary(summary: &RunSummary) -> String {
    format!(
        "tasks: {} done, {} failed, {} skipped ({} executed this process)\n",
        summary.done, summary.failed, summary.skipped, summary.executed
    )
}

/// Formats the ledger summary as two aligned tables plus failures.
pub fn render_status(report: &ledger::StatusReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>6}", "state", "tasks");
    for state in ["pending", "running", "done", "failed", "skipped"] {
        let count = report.state_counts.get(state).copied().unwrap_or(0);
        let _ = writeln!(out, "{state:<10} {count:>6}");
    }
    if !report.stage_counts.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>6} {:>7} {:>8}",
            "stage", "pending", "running", "done", "failed", "skipped"
        );
        for (stage, counts) in &report.stage_counts {
            let get = |s: &str| counts.get(s).copied().unwrap_or(0);
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>6} {:>7} {:>8}",
                stage,
                get("pending"),
                get("running"),
                get("done"),
                get("failed"),
                get("skipped")
            );
        }
    }
    if !report.failures.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "failures:");
        for (key, error) in &report.failures {
            let short = &key[..key.len().min(12)];
            let _ = writeln!(out, "  {short}  {error}");
        }
    }
    out
}

fn fail_config(e: &ConfigError) -> i32 {
    eprintln!("error: {e}");
    EXIT_USAGE
}

fn fail_runtime(message: &str) -> i32 {
    eprintln!("error: {message}");
    EXIT_RUNTIME
}

fn fail_pipeline(e: &PipelineError) -> i32 {
    eprintln!("error: {e}");
    match e {
        PipelineError::Config(_)
        | PipelineError::WorkDirInUse { .. }
        | PipelineError::SnapshotMissing { .. }
        | PipelineError::NoResults
        | PipelineError::Engine(EngineError::LedgerMissing { .. }) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Advisory lock on a work directory: a `.lock` file holding the
/// owner's PID. A lock whose process is gone is stale and reclaimed.
/// `status` deliberately does not take the lock.
#[derive(Debug)]
pub struct WorkLock {
    path: PathBuf,
}

impl WorkLock {
    pub fn acquire(work_dir: &Path) -> Result<WorkLock, String> {
        std::fs::create_dir_all(work_dir)
            .map_err(|e| format!("{}: {e}", work_dir.display()))?;
        let path = work_dir.join(".lock");
        loop {
            match std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(mut file) => {
                    let _ = writeln!(file, "{}", std::process::id());
                    return Ok(WorkLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    match holder_alive(&path) {
                        Some(pid) => {
                            return Err(format!(
                                "work directory is locked by running process {pid} ({})",
                                path.display()
                            ));
                        }
                        None => {
                            log::warn!("removing stale lock {}", path.display());
                            // ignore a racing removal; the loop retries
                            let _ = std::fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(format!("{}: {e}", path.display())),
            }
        }
    }
}

/// Returns the owning PID when the lock file names a live process.
fn holder_alive(path: &Path) -> Option<u32> {
    let text = std::fs::read_to_string(path).ok()?;
    let pid: u32 = text.trim().parse().ok()?;
    if pid != std::process::id() && Path::new(&format!("/proc/{pid}")).exists() {
        Some(pid)
    } else {
        None
    }
}

impl Drop for WorkLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkLock::acquire(dir.path()).unwrap();
        assert!(dir.path().join(".lock").is_file());
        // a second acquire by "another live process" is refused: write
        // our own PID is treated as self, so fake a live different one
        drop(lock);
        assert!(!dir.path().join(".lock").exists(), "lock released");
    }

    #[test]
    fn stale_lock_is_reclaimed() {
        let dir = tempfile::tempdir().unwrap();
        // PID 0 never names a live userspace process
        std::fs::write(dir.path().join(".lock"), "0\n").unwrap();
        let _lock = WorkLock::acquire(dir.path()).unwrap();
        assert!(dir.path().join(".lock").is_file());
    }

    #[test]
    fn foreign_live_pid_blocks_acquisition() {
        let dir = tempfile::tempdir().unwrap();
        // PID 1 is always alive on Linux
        std::fs::write(dir.path().join(".lock"), "1\n").unwrap();
        let err = WorkLock::acquire(dir.path()).unwrap_err();
        assert!(err.contains("locked by running process 1"), "{err}");
        assert!(dir.path().join(".lock").is_file(), "lock untouched");
    }

    #[test]
    fn status_rendering_is_stable() {
        let mut report = ledger::StatusReport::default();
        for state in ["pending", "running", "done", "failed", "skipped"] {
            report.state_counts.insert(state.to_string(), 0);
        }
        report.state_counts.insert("done".to_string(), 3);
        report
            .stage_counts
            .entry("calc".to_string())
            .or_default()
            .insert("done".to_string(), 3);
        report
            .failures
            .push(("abcdef0123456789".to_string(), "boom".to_string()));
        let text = render_status(&report);
        assert!(text.contains(&format!("{:<10} {:>6}", "done", 3)), "{text}");
        assert!(text.contains("abcdef012345  boom"), "{text}");
        assert!(!text.contains("abcdef0123456789"), "key is shortened");
    }
}
